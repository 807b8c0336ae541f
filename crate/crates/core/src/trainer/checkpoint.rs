use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::Vocab;
use crate::metrics::EvalReport;
use crate::model::CapsuleNlu;
use crate::tensor::ParamSet;
use crate::{Error, Result};

pub const FORMAT: &str = "capsule-nlu-checkpoint";
pub const VERSION: u32 = 1;

/// Everything needed to rebuild a trained model: parameters, the exact
/// config it was trained with, vocabularies and the RNG state at the end
/// of training. Stored as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub params: ParamSet<f32>,
    /// Epoch of the selected parameters within the last training stage.
    pub epoch: usize,
    pub metrics: Option<EvalReport>,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn new(
        config: TrainConfig,
        vocab: Vocab,
        params: ParamSet<f32>,
        epoch: usize,
        metrics: Option<EvalReport>,
        rng: ChaCha8Rng,
    ) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            config,
            vocab,
            params,
            epoch,
            metrics,
            rng,
        }
    }

    pub fn model(&self) -> Result<CapsuleNlu> {
        let intents = self.config.mode.has_intents().then(|| self.vocab.num_intents());
        CapsuleNlu::attach(&self.params, self.config.model, self.vocab.num_tags(), intents)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut ckpt: Self =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if ckpt.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "not a checkpoint (format {:?})",
                ckpt.format
            )));
        }
        if ckpt.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} is not supported (expected {VERSION})",
                ckpt.version
            )));
        }
        if !ckpt.params.all_finite() {
            return Err(Error::Checkpoint("checkpoint contains non-finite parameters".into()));
        }
        ckpt.vocab.reindex();
        ckpt.config.validate()?;
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| Error::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        fs::write(path, self.to_json()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}
