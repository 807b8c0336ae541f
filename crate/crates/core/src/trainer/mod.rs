//! Training loop, evaluation and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, FORMAT as CHECKPOINT_FORMAT, VERSION as CHECKPOINT_VERSION};
pub use optim::{rmsprop_scalar, RmsProp};

use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, TrainConfig};
use crate::data::{bucket_by_length, Utterance, Vocab};
use crate::metrics::{EvalReport, Prediction};
use crate::model::{CapsuleNlu, ForwardOptions, Objective};
use crate::tensor::{Gradients, Graph, ParamId, ParamSet, Real};
use crate::{Error, Result};

/// Validation metric used to pick the best epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    OverallAcc,
    SlotF1,
    IntentAcc,
}

impl Selection {
    pub fn score(self, r: &EvalReport) -> f64 {
        match self {
            Selection::OverallAcc => r.overall_acc.unwrap_or(0.0),
            Selection::SlotF1 => r.slot_f1,
            Selection::IntentAcc => r.intent_acc.unwrap_or(0.0),
        }
    }
}

/// One phase of training with its own optimizer state and early stopping.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub name: &'static str,
    pub objective: Objective,
    pub forward: ForwardOptions,
    pub selection: Selection,
    pub frozen: Vec<ParamId>,
}

/// Stages implied by the training mode.
pub fn stages(mode: Mode, model: &CapsuleNlu) -> Vec<Stage> {
    let all = ForwardOptions::default();
    match mode {
        Mode::Joint => vec![Stage {
            name: "joint",
            objective: Objective::Joint,
            forward: all,
            selection: Selection::OverallAcc,
            frozen: Vec::new(),
        }],
        Mode::SlotOnly => vec![Stage {
            name: "slot",
            objective: Objective::Slot,
            forward: all,
            selection: Selection::SlotF1,
            frozen: Vec::new(),
        }],
        Mode::TwoStage => vec![
            Stage {
                name: "slot",
                objective: Objective::Slot,
                forward: ForwardOptions {
                    intents: false,
                    reroute: false,
                    forced_intent: None,
                },
                selection: Selection::SlotF1,
                frozen: model.intent_params(),
            },
            Stage {
                name: "intent",
                objective: Objective::Intent,
                forward: ForwardOptions { reroute: false, ..all },
                selection: Selection::IntentAcc,
                frozen: model.slot_path_params(),
            },
        ],
    }
}

/// Model config actually used for `cfg`: two-stage training has no
/// re-routing parameters.
pub fn effective_config(cfg: &TrainConfig) -> TrainConfig {
    let mut cfg = *cfg;
    if cfg.mode == Mode::TwoStage {
        cfg.model.reroute = false;
    }
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    /// Mean per-utterance objective over the epoch, dropout active.
    pub train_loss: f64,
    /// Mean objective over validation utterances whose labels are known.
    pub valid_loss: f64,
    pub valid_slot_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_intent_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_overall_acc: Option<f64>,
    pub selection: f64,
    pub improved: bool,
    pub max_grad_norm: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
}

/// An utterance as vocabulary indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub tokens: Vec<usize>,
    pub tags: Vec<usize>,
    pub intent: usize,
}

pub fn encode_all(utts: &[Utterance], vocab: &Vocab) -> Result<Vec<Encoded>> {
    utts.iter()
        .map(|u| {
            Ok(Encoded {
                tokens: vocab.encode_tokens(&u.tokens),
                tags: vocab.encode_tags(&u.slot_tags)?,
                intent: vocab.encode_intent(&u.intent)?,
            })
        })
        .collect()
}

/// Trains a model and returns the best-validation checkpoint.
pub fn train(
    cfg: &TrainConfig,
    train: &[Utterance],
    valid: &[Utterance],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let cfg = effective_config(cfg);
    cfg.validate()?;
    if valid.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let mut vocab = Vocab::build(train, cfg.training.min_count)?;
    vocab.lowercase = cfg.training.lowercase;
    let data = encode_all(train, &vocab)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::<f32>::new();
    let intents = cfg.mode.has_intents().then(|| vocab.num_intents());
    let model = CapsuleNlu::register(
        &mut params,
        cfg.model,
        vocab.num_tokens(),
        vocab.num_tags(),
        intents,
        &mut rng,
    );
    info!(
        "model: {} parameter values, {} tags, {:?} intents, mode {}",
        params.num_values(),
        vocab.num_tags(),
        intents,
        cfg.mode
    );

    let mut history = Vec::new();
    let mut final_epoch = 0;
    let mut final_report = None;
    for stage in stages(cfg.mode, &model) {
        let mut opt = RmsProp::new(
            &params,
            cfg.optimizer.learning_rate as f32,
            cfg.optimizer.decay as f32,
            cfg.optimizer.epsilon as f32,
        );
        let mut best: Option<(f64, f64, ParamSet<f32>, EvalReport, usize)> = None;
        let mut stale = 0;
        for epoch in 1..=cfg.training.max_epochs {
            let start = Instant::now();
            let (train_loss, max_grad_norm) =
                run_epoch(&model, &mut params, &mut opt, &stage, &cfg, &data, &mut rng, epoch)?;
            let (report, valid_loss) =
                evaluate_with_loss(&model, &params, &vocab, valid, stage.forward, &cfg, stage.objective)?;
            let score = stage.selection.score(&report);
            // ties on the selection metric go to the lower validation loss
            let improved = best
                .as_ref()
                .is_none_or(|b| score > b.0 || (score == b.0 && valid_loss < b.1));
            let log = EpochLog {
                stage: stage.name.to_string(),
                epoch,
                train_loss,
                valid_loss,
                valid_slot_f1: report.slot_f1,
                valid_intent_acc: report.intent_acc,
                valid_overall_acc: report.overall_acc,
                selection: score,
                improved,
                max_grad_norm,
                seconds: start.elapsed().as_secs_f64(),
            };
            info!(
                "[{}] epoch {epoch}: loss {train_loss:.5} valid slot_f1 {:.4} intent_acc {:?} overall_acc {:?}{}",
                stage.name,
                report.slot_f1,
                report.intent_acc,
                report.overall_acc,
                if improved { " *" } else { "" }
            );
            on_epoch(&log);
            history.push(log);
            if improved {
                best = Some((score, valid_loss, params.clone(), report, epoch));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.training.patience {
                    info!("[{}] no improvement for {stale} epochs, stopping", stage.name);
                    break;
                }
            }
        }
        let (_, _, best_params, report, epoch) = best.expect("at least one epoch");
        params = best_params;
        final_epoch = epoch;
        final_report = Some(report);
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(cfg, vocab, params, final_epoch, final_report, rng),
        history,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &CapsuleNlu,
    params: &mut ParamSet<f32>,
    opt: &mut RmsProp<f32>,
    stage: &Stage,
    cfg: &TrainConfig,
    data: &[Encoded],
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<(f64, f64)> {
    let lengths: Vec<usize> = data.iter().map(|e| e.tokens.len()).collect();
    let batches = bucket_by_length(&lengths, cfg.training.batch_size, rng);
    let mut grads = Gradients::zeros_like(params);
    let mut total = 0.0;
    let mut max_norm = 0.0f64;
    for (step, batch) in batches.iter().enumerate() {
        grads.zero();
        for &i in batch {
            let ex = &data[i];
            let mut g = Graph::new(params);
            for &id in &stage.frozen {
                g.freeze(id);
            }
            let mut opts = stage.forward;
            if cfg.model.teacher_forcing {
                opts.forced_intent = Some(ex.intent);
            }
            let dropout = (cfg.model.dropout > 0.0).then_some(&mut *rng);
            let pass = model.forward(&mut g, &ex.tokens, opts, dropout)?;
            let loss = model.loss(&mut g, &pass, &ex.tags, ex.intent, &cfg.loss, stage.objective)?;
            let value = g.scalar(loss).as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("loss is {value} on training utterance {i}"),
                });
            }
            total += value;
            g.backward(loss, &mut grads)?;
        }
        grads.scale(1.0 / batch.len() as f32);
        if !grads.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                detail: "non-finite gradient".into(),
            });
        }
        let norm = if cfg.optimizer.clip_norm > 0.0 {
            grads.clip_global_norm(cfg.optimizer.clip_norm as f32)
        } else {
            grads.global_norm()
        };
        max_norm = max_norm.max(norm.as_f64());
        opt.step(params, &grads, &stage.frozen);
        if !params.all_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                detail: "parameters became non-finite".into(),
            });
        }
    }
    Ok((total / data.len().max(1) as f64, max_norm))
}

/// Mean per-utterance objective in evaluation mode (no dropout).
pub fn mean_loss<F: Real>(
    model: &CapsuleNlu,
    params: &ParamSet<F>,
    data: &[Encoded],
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("no utterances to score".into()));
    }
    let mut total = 0.0;
    for ex in data {
        let mut g = Graph::new(params);
        g.freeze_all();
        let pass = model.forward::<F, ChaCha8Rng>(&mut g, &ex.tokens, ForwardOptions::default(), None)?;
        let loss = model.loss(&mut g, &pass, &ex.tags, ex.intent, &cfg.loss, objective)?;
        total += g.scalar(loss).as_f64();
    }
    Ok(total / data.len() as f64)
}

/// Tags and intent for each utterance, in evaluation mode.
pub fn predict_all<F: Real>(
    model: &CapsuleNlu,
    params: &ParamSet<F>,
    vocab: &Vocab,
    utts: &[Utterance],
    opts: ForwardOptions,
) -> Result<Vec<Prediction>> {
    utts.iter()
        .map(|u| predict_tokens(model, params, vocab, &u.tokens, opts))
        .collect()
}

pub fn predict_tokens<F: Real, S: AsRef<str>>(
    model: &CapsuleNlu,
    params: &ParamSet<F>,
    vocab: &Vocab,
    tokens: &[S],
    opts: ForwardOptions,
) -> Result<Prediction> {
    let ids = vocab.encode_tokens(tokens);
    let d = model.decode_with(params, &ids, opts)?;
    Ok(to_prediction(vocab, tokens, &d))
}

pub fn evaluate_model<F: Real>(
    model: &CapsuleNlu,
    params: &ParamSet<F>,
    vocab: &Vocab,
    utts: &[Utterance],
    opts: ForwardOptions,
) -> Result<EvalReport> {
    if utts.is_empty() {
        return Err(crate::metrics::MetricError::Empty.into());
    }
    let preds = predict_all(model, params, vocab, utts, opts)?;
    Ok(EvalReport::compute(&preds, utts)?)
}

/// Evaluation report plus the mean stage objective over the utterances
/// whose tags and intent are in the vocabulary.
pub fn evaluate_with_loss<F: Real>(
    model: &CapsuleNlu,
    params: &ParamSet<F>,
    vocab: &Vocab,
    utts: &[Utterance],
    opts: ForwardOptions,
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<(EvalReport, f64)> {
    if utts.is_empty() {
        return Err(crate::metrics::MetricError::Empty.into());
    }
    let mut preds = Vec::with_capacity(utts.len());
    let mut total = 0.0;
    let mut scored = 0usize;
    for u in utts {
        let ids = vocab.encode_tokens(&u.tokens);
        let mut g = Graph::new(params);
        g.freeze_all();
        let pass = model.forward::<F, ChaCha8Rng>(&mut g, &ids, opts, None)?;
        let d = CapsuleNlu::decisions(&g, &pass);
        if let (Ok(tags), Ok(intent)) = (vocab.encode_tags(&u.slot_tags), vocab.encode_intent(&u.intent)) {
            let loss = model.loss(&mut g, &pass, &tags, intent, &cfg.loss, objective)?;
            total += g.scalar(loss).as_f64();
            scored += 1;
        }
        preds.push(to_prediction(vocab, &u.tokens, &d));
    }
    let report = EvalReport::compute(&preds, utts)?;
    let loss = if scored == 0 {
        f64::INFINITY
    } else {
        total / scored as f64
    };
    Ok((report, loss))
}

fn to_prediction<S: AsRef<str>>(vocab: &Vocab, tokens: &[S], d: &crate::model::Decoded) -> Prediction {
    Prediction {
        tokens: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
        tags: d.tags.iter().map(|&t| vocab.tags.name(t).to_string()).collect(),
        intent: d.intent.map(|i| vocab.intents.name(i).to_string()),
        intent_score: d.intent.map(|i| d.intent_norms[i]),
    }
}

/// Scores a checkpoint on `utts` with dropout disabled.
pub fn evaluate(ckpt: &Checkpoint, utts: &[Utterance]) -> Result<EvalReport> {
    let model = ckpt.model()?;
    evaluate_model(&model, &ckpt.params, &ckpt.vocab, utts, ForwardOptions::default())
}

pub fn predict(ckpt: &Checkpoint, utts: &[Utterance]) -> Result<Vec<Prediction>> {
    let model = ckpt.model()?;
    predict_all(&model, &ckpt.params, &ckpt.vocab, utts, ForwardOptions::default())
}
