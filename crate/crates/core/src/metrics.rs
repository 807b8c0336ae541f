//! Span-level slot F1, intent accuracy and sentence-level accuracy.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Bio, Utterance};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("utterance {index}: {pred} predicted tags for {gold} gold tags")]
    LengthMismatch { index: usize, pred: usize, gold: usize },
    #[error("{pred} predictions for {gold} references")]
    CountMismatch { pred: usize, gold: usize },
    #[error("cannot evaluate an empty set")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// A labelled chunk covering tokens `start..end`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// Chunks of a BIO sequence, following conlleval: `B-x` always opens a
/// chunk, `I-x` opens one unless it continues a chunk of type `x`, and
/// anything that is not `B-`/`I-` closes the current chunk.
pub fn extract_spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (t, tag) in tags.iter().enumerate() {
        let (starts, kind) = match Bio::parse(tag.as_ref()) {
            Some(Bio::Begin(k)) => (true, Some(k)),
            Some(Bio::Inside(k)) => (open.is_none_or(|(_, cur)| cur != k), Some(k)),
            _ => (false, None),
        };
        if starts || kind.is_none() {
            if let Some((s, label)) = open.take() {
                spans.push(Span {
                    start: s,
                    end: t,
                    label: label.to_string(),
                });
            }
        }
        if starts {
            open = kind.map(|k| (t, k));
        }
    }
    if let Some((s, label)) = open {
        spans.push(Span {
            start: s,
            end: tags.len(),
            label: label.to_string(),
        });
    }
    spans
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanCounts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SpanCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn check_lengths<S: AsRef<str>, T: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<T>]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(MetricError::CountMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(MetricError::LengthMismatch {
                index: i,
                pred: p.len(),
                gold: g.len(),
            });
        }
    }
    Ok(())
}

/// Exact span-and-type matches, overall and per slot type.
pub fn span_counts<S: AsRef<str>, T: AsRef<str>>(
    pred: &[Vec<S>],
    gold: &[Vec<T>],
) -> Result<(SpanCounts, BTreeMap<String, SpanCounts>)> {
    check_lengths(pred, gold)?;
    let mut total = SpanCounts::default();
    let mut per_type: BTreeMap<String, SpanCounts> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        let ps = extract_spans(p);
        let gs = extract_spans(g);
        let gold_set: HashSet<&Span> = gs.iter().collect();
        for s in &ps {
            let e = per_type.entry(s.label.clone()).or_default();
            e.predicted += 1;
            total.predicted += 1;
            if gold_set.contains(s) {
                e.correct += 1;
                total.correct += 1;
            }
        }
        for s in &gs {
            per_type.entry(s.label.clone()).or_default().gold += 1;
            total.gold += 1;
        }
    }
    Ok((total, per_type))
}

/// Corpus-level span precision, recall and F1.
pub fn slot_f1<S: AsRef<str>, T: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<T>]) -> Result<SlotScore> {
    let (c, _) = span_counts(pred, gold)?;
    Ok(SlotScore {
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
    })
}

pub fn intent_accuracy<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gold: &[T]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(MetricError::CountMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    if gold.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p.as_ref() == g.as_ref()).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Fraction of utterances whose tag sequence matches exactly.
pub fn exact_match<S: AsRef<str>, T: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<T>]) -> Result<f64> {
    check_lengths(pred, gold)?;
    if gold.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| same_tags(p, g)).count();
    Ok(hits as f64 / gold.len() as f64)
}

fn same_tags<S: AsRef<str>, T: AsRef<str>>(p: &[S], g: &[T]) -> bool {
    p.iter().zip(g).all(|(a, b)| a.as_ref() == b.as_ref())
}

/// Fraction of utterances with the intent and every tag correct.
pub fn overall_accuracy<S: AsRef<str>, T: AsRef<str>>(
    pred_tags: &[Vec<S>],
    pred_intents: &[S],
    gold_tags: &[Vec<T>],
    gold_intents: &[T],
) -> Result<f64> {
    check_lengths(pred_tags, gold_tags)?;
    if pred_intents.len() != gold_intents.len() || gold_intents.len() != gold_tags.len() {
        return Err(MetricError::CountMismatch {
            pred: pred_intents.len(),
            gold: gold_intents.len(),
        });
    }
    if gold_tags.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = (0..gold_tags.len())
        .filter(|&i| pred_intents[i].as_ref() == gold_intents[i].as_ref() && same_tags(&pred_tags[i], &gold_tags[i]))
        .count();
    Ok(hits as f64 / gold_tags.len() as f64)
}

/// Model output for one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    pub intent: Option<String>,
    pub intent_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotBreakdown {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentBreakdown {
    pub accuracy: f64,
    pub support: usize,
}

/// Evaluation summary. Intent fields are absent for slot-only models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub slot_f1: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub slot_exact_match: f64,
    pub token_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall_acc: Option<f64>,
    pub per_slot: BTreeMap<String, SlotBreakdown>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_intent: BTreeMap<String, IntentBreakdown>,
    /// `gold → predicted → count`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub intent_confusion: BTreeMap<String, BTreeMap<String, usize>>,
}

impl EvalReport {
    /// Scores predictions against references. Labels are compared as
    /// strings, so labels the model has never seen simply count as wrong.
    pub fn compute(preds: &[Prediction], gold: &[Utterance]) -> Result<Self> {
        if preds.len() != gold.len() {
            return Err(MetricError::CountMismatch {
                pred: preds.len(),
                gold: gold.len(),
            });
        }
        if gold.is_empty() {
            return Err(MetricError::Empty);
        }
        let pred_tags: Vec<&Vec<String>> = preds.iter().map(|p| &p.tags).collect();
        let gold_tags: Vec<&Vec<String>> = gold.iter().map(|u| &u.slot_tags).collect();
        let pred_tags: Vec<Vec<&str>> = pred_tags
            .iter()
            .map(|v| v.iter().map(String::as_str).collect())
            .collect();
        let gold_tags: Vec<Vec<&str>> = gold_tags
            .iter()
            .map(|v| v.iter().map(String::as_str).collect())
            .collect();

        let (total, per_type) = span_counts(&pred_tags, &gold_tags)?;
        let exact = exact_match(&pred_tags, &gold_tags)?;
        let tokens: usize = gold_tags.iter().map(Vec::len).sum();
        let token_hits: usize = pred_tags
            .iter()
            .zip(&gold_tags)
            .map(|(p, g)| p.iter().zip(g).filter(|(a, b)| a == b).count())
            .sum();

        let per_slot = per_type
            .into_iter()
            .map(|(k, c)| {
                (
                    k,
                    SlotBreakdown {
                        precision: c.precision(),
                        recall: c.recall(),
                        f1: c.f1(),
                        support: c.gold,
                    },
                )
            })
            .collect();

        let mut report = Self {
            utterances: gold.len(),
            slot_f1: total.f1(),
            slot_precision: total.precision(),
            slot_recall: total.recall(),
            slot_exact_match: exact,
            token_acc: ratio(token_hits, tokens),
            intent_acc: None,
            overall_acc: None,
            per_slot,
            per_intent: BTreeMap::new(),
            intent_confusion: BTreeMap::new(),
        };

        let intents: Option<Vec<&str>> = preds.iter().map(|p| p.intent.as_deref()).collect();
        if let Some(pred_intents) = intents {
            let gold_intents: Vec<&str> = gold.iter().map(|u| u.intent.as_str()).collect();
            report.intent_acc = Some(intent_accuracy(&pred_intents, &gold_intents)?);
            report.overall_acc = Some(overall_accuracy(&pred_tags, &pred_intents, &gold_tags, &gold_intents)?);
            let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
            for (p, g) in pred_intents.iter().zip(&gold_intents) {
                let e = counts.entry(g.to_string()).or_default();
                e.1 += 1;
                if p == g {
                    e.0 += 1;
                }
                *report
                    .intent_confusion
                    .entry(g.to_string())
                    .or_default()
                    .entry(p.to_string())
                    .or_default() += 1;
            }
            report.per_intent = counts
                .into_iter()
                .map(|(k, (hit, n))| {
                    (
                        k,
                        IntentBreakdown {
                            accuracy: ratio(hit, n),
                            support: n,
                        },
                    )
                })
                .collect();
        }
        report.check_consistency();
        Ok(report)
    }

    fn check_consistency(&self) {
        if let (Some(overall), Some(intent)) = (self.overall_acc, self.intent_acc) {
            assert!(
                overall <= intent.min(self.slot_exact_match) + 1e-12,
                "overall accuracy {overall} exceeds intent {intent} or exact match {}",
                self.slot_exact_match
            );
        }
    }

    /// One `key=value` per line; breakdowns use dotted keys.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("utterances", self.utterances.to_string());
        put("slot_f1", fmt(self.slot_f1));
        put("slot_precision", fmt(self.slot_precision));
        put("slot_recall", fmt(self.slot_recall));
        put("slot_exact_match", fmt(self.slot_exact_match));
        put("token_acc", fmt(self.token_acc));
        if let Some(v) = self.intent_acc {
            put("intent_acc", fmt(v));
        }
        if let Some(v) = self.overall_acc {
            put("overall_acc", fmt(v));
        }
        for (k, s) in &self.per_slot {
            put(&format!("slot.{k}.f1"), fmt(s.f1));
            put(&format!("slot.{k}.precision"), fmt(s.precision));
            put(&format!("slot.{k}.recall"), fmt(s.recall));
            put(&format!("slot.{k}.support"), s.support.to_string());
        }
        for (k, s) in &self.per_intent {
            put(&format!("intent.{k}.acc"), fmt(s.accuracy));
            put(&format!("intent.{k}.support"), s.support.to_string());
        }
        out
    }

    /// Parses the output of [`EvalReport::to_key_values`] into a map.
    pub fn parse_key_values(text: &str) -> BTreeMap<String, String> {
        text.lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}
