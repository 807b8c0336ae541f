//! Training configuration, presets and `key=value` overrides.
//!
//! A config file is TOML with four optional tables; every field has a
//! default (the `desk` preset):
//!
//! ```toml
//! mode = "joint"          # joint | slot_only | two_stage
//! seed = 0
//!
//! [model]
//! word_dim = 128
//! hidden_dim = 64
//! slot_dim = 64
//! intent_dim = 32
//! iter_slot = 2
//! iter_intent = 2
//! dropout = 0.2
//! reroute = true
//! alpha = 0.1
//! teacher_forcing = false
//!
//! [loss]
//! lambda = 0.5
//! margin_pos = 0.8
//! margin_neg = 0.2
//! beta = 1.0
//!
//! [optimizer]
//! learning_rate = 0.001
//! decay = 0.9
//! epsilon = 1e-8
//! clip_norm = 5.0
//!
//! [training]
//! batch_size = 32
//! max_epochs = 50
//! patience = 5
//! min_count = 1
//! lowercase = false
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::losses::LossConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Slot and intent losses minimized together, with re-routing.
    #[default]
    Joint,
    /// Word-to-slot routing only; no intent capsules.
    SlotOnly,
    /// Slot path first, then intent capsules on frozen slot capsules.
    TwoStage,
}

impl Mode {
    pub fn has_intents(self) -> bool {
        self != Mode::SlotOnly
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Joint => "joint",
            Mode::SlotOnly => "slot_only",
            Mode::TwoStage => "two_stage",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "joint" => Ok(Mode::Joint),
            "slot_only" => Ok(Mode::SlotOnly),
            "two_stage" => Ok(Mode::TwoStage),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected joint, slot_only or two_stage)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub hidden_dim: usize,
    pub slot_dim: usize,
    pub intent_dim: usize,
    pub iter_slot: usize,
    pub iter_intent: usize,
    pub dropout: f64,
    pub reroute: bool,
    pub alpha: f64,
    /// Re-route with the gold intent during training.
    pub teacher_forcing: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            word_dim: 128,
            hidden_dim: 64,
            slot_dim: 64,
            intent_dim: 32,
            iter_slot: 2,
            iter_intent: 2,
            dropout: 0.2,
            reroute: true,
            alpha: 0.1,
            teacher_forcing: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay: 0.9,
            epsilon: 1e-8,
            clip_norm: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_count: usize,
    pub lowercase: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            min_count: 1,
            lowercase: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    PaperSnips,
    PaperAtis,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper-snips" | "paper_snips" => Ok(Preset::PaperSnips),
            "paper-atis" | "paper_atis" => Ok(Preset::PaperAtis),
            _ => Err(Error::Config(format!(
                "unknown preset {s:?} (expected desk, paper-snips or paper-atis)"
            ))),
        }
    }
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let mut cfg = Self::default();
        let dims = match p {
            Preset::Desk => return cfg,
            Preset::PaperSnips => (1024, 512, 512, 128, 2, 2),
            Preset::PaperAtis => (1024, 512, 512, 256, 3, 3),
        };
        let m = &mut cfg.model;
        (
            m.word_dim,
            m.hidden_dim,
            m.slot_dim,
            m.intent_dim,
            m.iter_slot,
            m.iter_intent,
        ) = dims;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Applies `section.field=value` overrides. Values are parsed as TOML
    /// scalars, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = parse_scalar(raw.trim());
            let (path, last) = match key.trim().rsplit_once('.') {
                Some((path, last)) => (Some(path), last),
                None => (None, key.trim()),
            };
            let unknown = || Error::Config(format!("override key {key:?} is not a config field"));
            let mut node = &mut doc;
            for part in path.into_iter().flat_map(|p| p.split('.')) {
                node = node.get_mut(part).ok_or_else(unknown)?;
            }
            let slot = node.get_mut(last).ok_or_else(unknown)?;
            *slot = coerce(value, slot);
        }
        let cfg: Self = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let dims = [
            m.word_dim,
            m.hidden_dim,
            m.slot_dim,
            m.intent_dim,
            m.iter_slot,
            m.iter_intent,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(
                "dimensions and iteration counts must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", m.dropout)));
        }
        if !(m.alpha >= 0.0 && m.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", m.alpha)));
        }
        self.loss.validate()?;
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && (0.0..1.0).contains(&o.decay) && o.epsilon > 0.0 && o.clip_norm >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        let t = &self.training;
        if t.batch_size == 0 || t.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Integers given for float fields are widened.
fn coerce(value: toml::Value, current: &toml::Value) -> toml::Value {
    match (value, current) {
        (toml::Value::Integer(i), toml::Value::Float(_)) => toml::Value::Float(i as f64),
        (v, _) => v,
    }
}
