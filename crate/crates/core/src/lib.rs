//! Capsule networks for joint slot filling and intent detection.
//!
//! Words are encoded by a bidirectional LSTM, routed into slot capsules
//! (one per BIO tag) and then into intent capsules (one per intent). The
//! predicted intent can feed back into a second word-to-slot routing pass.

pub mod capsules;
pub mod config;
pub mod data;
pub mod encoder;
pub mod export;
pub mod init;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("training diverged in epoch {epoch} at step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
