//! Agreement matrices as CSV, and routing-entropy summaries.
//!
//! One table per routing layer, iteration and phase. Rows are upper
//! capsules and columns lower capsules, so every column sums to one.
//! Files are named `<layer>_iter<i>_<phase>.csv`, e.g.
//! `slot_iter2_post.csv`. The header row starts with the layer name
//! followed by the lower-capsule names.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::capsules::{mean_entropy, transpose, Routing};
use crate::data::Utterance;
use crate::model::ForwardOptions;
use crate::tensor::{Graph, Tensor};
use crate::trainer::Checkpoint;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    /// Words to slot capsules.
    Slot,
    /// Slot capsules to intent capsules.
    Intent,
    /// Words to slot capsules, re-routed with the predicted intent.
    Reroute,
}

impl Layer {
    pub fn name(self) -> &'static str {
        match self {
            Layer::Slot => "slot",
            Layer::Intent => "intent",
            Layer::Reroute => "reroute",
        }
    }
}

/// Agreements used to compute an iteration (`Pre`) or recomputed from the
/// logits after its update (`Post`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pre,
    Post,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pre => "pre",
            Phase::Post => "post",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgreementTable {
    pub layer: Layer,
    pub iteration: usize,
    pub phase: Phase,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    /// `[rows, columns]`.
    pub values: Tensor<f64>,
}

impl AgreementTable {
    pub fn file_name(&self) -> String {
        format!("{}_iter{}_{}.csv", self.layer.name(), self.iteration, self.phase)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![self.layer.name().to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(csv_error)?;
        for (r, name) in self.rows.iter().enumerate() {
            let mut record = vec![name.clone()];
            record.extend(self.values.row(r).iter().map(|v| format!("{v:.10e}")));
            w.write_record(&record).map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Parses a table written by [`AgreementTable::to_csv`].
    pub fn from_csv(text: &str, layer: Layer, iteration: usize, phase: Phase) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_error)?.clone();
        let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_error)?;
            rows.push(rec.get(0).unwrap_or_default().to_string());
            for cell in rec.iter().skip(1) {
                values.push(
                    cell.parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad agreement value {cell:?}: {e}")))?,
                );
            }
        }
        let values = Tensor::new(vec![rows.len(), columns.len()], values)?;
        Ok(Self {
            layer,
            iteration,
            phase,
            rows,
            columns,
            values,
        })
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

fn tables_for(
    g: &Graph<'_, f32>,
    routing: &Routing,
    layer: Layer,
    upper: &[String],
    lower: &[String],
) -> Vec<AgreementTable> {
    let mut out = Vec::new();
    for (i, step) in routing.steps.iter().enumerate() {
        for (phase, c) in [(Phase::Pre, step.c_pre), (Phase::Post, step.c_post)] {
            out.push(AgreementTable {
                layer,
                iteration: i + 1,
                phase,
                rows: upper.to_vec(),
                columns: lower.to_vec(),
                values: transpose(&g.tensor(c).cast()),
            });
        }
    }
    out
}

/// All agreement tables for one tokenized utterance.
pub fn agreement_tables<S: AsRef<str>>(ckpt: &Checkpoint, tokens: &[S]) -> Result<Vec<AgreementTable>> {
    let model = ckpt.model()?;
    let ids = ckpt.vocab.encode_tokens(tokens);
    let mut g = Graph::new(&ckpt.params);
    g.freeze_all();
    let pass = model.forward::<f32, ChaCha8Rng>(&mut g, &ids, ForwardOptions::default(), None)?;
    let words: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
    let tags = ckpt.vocab.tags.names();
    let mut tables = tables_for(&g, &pass.slot_routing, Layer::Slot, tags, &words);
    if let Some(r) = &pass.intent_routing {
        tables.extend(tables_for(&g, r, Layer::Intent, ckpt.vocab.intents.names(), tags));
    }
    if let Some(r) = &pass.rerouting {
        tables.extend(tables_for(&g, r, Layer::Reroute, tags, &words));
    }
    Ok(tables)
}

/// Writes every agreement table for `tokens` into `dir`.
pub fn export_agreements<S: AsRef<str>>(ckpt: &Checkpoint, tokens: &[S], dir: &Path) -> Result<Vec<PathBuf>> {
    if tokens.is_empty() {
        return Err(Error::Config("cannot export agreements for an empty utterance".into()));
    }
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    for table in agreement_tables(ckpt, tokens)? {
        let path = dir.join(table.file_name());
        fs::write(&path, table.to_csv()?).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

/// Word-to-slot routing entropy averaged over all words of a split.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropySummary {
    /// Mean entropy (nats) of the post-update agreements of each iteration.
    pub per_iteration: Vec<f64>,
    pub words: usize,
}

/// Entropy of the agreements that decide the slot tags (the re-routed pass
/// when the model re-routes).
pub fn routing_entropy(ckpt: &Checkpoint, utts: &[Utterance]) -> Result<EntropySummary> {
    if utts.is_empty() {
        return Err(crate::metrics::MetricError::Empty.into());
    }
    let model = ckpt.model()?;
    let iters = model.config.iter_slot;
    let mut sums = vec![0.0; iters];
    let mut words = 0;
    for u in utts {
        let ids = ckpt.vocab.encode_tokens(&u.tokens);
        let mut g = Graph::new(&ckpt.params);
        g.freeze_all();
        let pass = model.forward::<f32, ChaCha8Rng>(&mut g, &ids, ForwardOptions::default(), None)?;
        for (i, step) in pass.decisive_slot_routing().steps.iter().enumerate() {
            sums[i] += mean_entropy(&g.tensor(step.c_post)) * ids.len() as f64;
        }
        words += ids.len();
    }
    Ok(EntropySummary {
        per_iteration: sums.into_iter().map(|s| s / words as f64).collect(),
        words,
    })
}
