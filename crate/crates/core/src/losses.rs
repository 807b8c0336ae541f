//! Training objectives.

use serde::{Deserialize, Serialize};

use crate::capsules::activation_norms;
use crate::tensor::{Graph, Real, Result, Tensor, Var};
use crate::Error;

/// Floor applied to agreement values inside the slot log-likelihood.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Down-weighting of absent intents.
    pub lambda: f64,
    pub margin_pos: f64,
    pub margin_neg: f64,
    /// Weight of the intent term in the joint objective.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            margin_pos: 0.8,
            margin_neg: 0.2,
            beta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> std::result::Result<(), Error> {
        let ok = 0.0 < self.margin_neg
            && self.margin_neg < self.margin_pos
            && self.margin_pos < 1.0
            && self.lambda >= 0.0
            && self.beta >= 0.0;
        if ok && self.lambda.is_finite() && self.beta.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss settings need 0 < margin_neg < margin_pos < 1 and lambda, beta >= 0 (got {self:?})"
            )))
        }
    }
}

/// Negative log-likelihood of the gold tags under the word-to-slot
/// agreements `c` (`[T, K]`).
pub fn slot_loss<F: Real>(g: &mut Graph<'_, F>, c: Var, gold: &[usize]) -> Result<Var> {
    g.nll_clip(c, gold, F::from_f64(LOG_FLOOR))
}

/// Margin loss on the norms of the intent activations `u` (`[L, D_L]`).
pub fn intent_loss<F: Real>(g: &mut Graph<'_, F>, u: Var, gold: usize, cfg: &LossConfig) -> Result<Var> {
    let norms = g.row_norms(u)?;
    g.margin_loss(
        norms,
        gold,
        F::from_f64(cfg.margin_pos),
        F::from_f64(cfg.margin_neg),
        F::from_f64(cfg.lambda),
    )
}

/// `slot + beta · intent`; the slot term alone when there is no intent term.
pub fn joint_loss<F: Real>(g: &mut Graph<'_, F>, slot: Var, intent: Option<Var>, beta: f64) -> Result<Var> {
    match intent {
        Some(i) => {
            let weighted = g.scale(i, F::from_f64(beta));
            g.add(slot, weighted)
        }
        None => Ok(slot),
    }
}

/// Value-level slot loss; rows where `mask` is false are ignored.
pub fn slot_loss_value<F: Real>(c: &Tensor<F>, gold: &[usize], mask: Option<&[bool]>) -> f64 {
    let k = c.shape()[c.shape().len() - 1];
    c.data()
        .chunks(k)
        .zip(gold)
        .enumerate()
        .filter(|(t, _)| mask.is_none_or(|m| m[*t]))
        .map(|(_, (row, &y))| -row[y].as_f64().max(LOG_FLOOR).ln())
        .sum()
}

pub fn intent_loss_value<F: Real>(u: &Tensor<F>, gold: usize, cfg: &LossConfig) -> f64 {
    activation_norms(u)
        .into_iter()
        .enumerate()
        .map(|(l, n)| {
            let n = n.as_f64();
            if l == gold {
                (cfg.margin_pos - n).max(0.0).powi(2)
            } else {
                cfg.lambda * (n - cfg.margin_neg).max(0.0).powi(2)
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, ParamSet};
    use proptest::prelude::*;

    fn u_with_norms(norms: &[f64]) -> Tensor<f64> {
        let data = norms.iter().flat_map(|&n| [n * 0.6, -n * 0.8]).collect();
        Tensor::new(vec![norms.len(), 2], data).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = [
            LossConfig {
                margin_neg: 0.9,
                ..Default::default()
            },
            LossConfig {
                margin_neg: 0.0,
                ..Default::default()
            },
            LossConfig {
                margin_pos: 1.0,
                ..Default::default()
            },
            LossConfig {
                lambda: -0.1,
                ..Default::default()
            },
            LossConfig {
                beta: -1.0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn slot_loss_examples() {
        let one_hot = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(slot_loss_value(&one_hot, &[1, 2], None), 0.0);
        let uniform = Tensor::new(vec![4, 3], vec![1.0 / 3.0; 12]).unwrap();
        assert!((slot_loss_value(&uniform, &[0, 1, 2, 0], None) - 4.0 * 3f64.ln()).abs() < 1e-12);
        let clipped = slot_loss_value(&one_hot, &[0, 2], None);
        assert!((clipped + LOG_FLOOR.ln()).abs() < 1e-9);
        assert_eq!(
            slot_loss_value(&uniform, &[0, 1, 2, 0], Some(&[true, false, false, false])),
            3f64.ln()
        );

        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let c = g.constant(uniform.clone());
        let l = slot_loss(&mut g, c, &[0, 1, 2, 0]).unwrap();
        assert!((g.scalar(l) - 4.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn slot_loss_gradient() {
        let c = Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap();
        let err = grad_check(|g, x| slot_loss(g, x, &[1, 2]), &c, 1e-7).unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn intent_loss_examples() {
        let cfg = LossConfig::default();
        assert_eq!(intent_loss_value(&u_with_norms(&[0.1, 0.85, 0.2]), 1, &cfg), 0.0);
        assert!((intent_loss_value(&u_with_norms(&[0.0, 0.0]), 0, &cfg) - 0.64).abs() < 1e-12);
        let wrong = intent_loss_value(&u_with_norms(&[0.8, 0.7]), 0, &cfg);
        assert!((wrong - 0.125).abs() < 1e-12);

        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let u = g.constant(u_with_norms(&[0.8, 0.7]));
        let l = intent_loss(&mut g, u, 0, &cfg).unwrap();
        assert!((g.scalar(l) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn joint_combination() {
        let params = ParamSet::<f64>::new();
        let mut g = Graph::new(&params);
        let s = g.constant(Tensor::scalar(1.5));
        let i = g.constant(Tensor::scalar(2.0));
        let j = joint_loss(&mut g, s, Some(i), 0.0).unwrap();
        assert_eq!(g.scalar(j), 1.5);
        let j = joint_loss(&mut g, s, Some(i), 1.0).unwrap();
        assert_eq!(g.scalar(j), 3.5);
        let j = joint_loss(&mut g, s, None, 1.0).unwrap();
        assert_eq!(j, s);
        let z = g.constant(Tensor::scalar(0.0));
        let j = joint_loss(&mut g, z, Some(z), 1.0).unwrap();
        assert_eq!(g.scalar(j), 0.0);
    }

    proptest! {
        #[test]
        fn intent_loss_nonnegative_and_zero_iff_separated(
            norms in proptest::collection::vec(0.0f64..0.99, 1..6),
            gold_seed in 0usize..100,
        ) {
            let cfg = LossConfig::default();
            let gold = gold_seed % norms.len();
            let loss = intent_loss_value(&u_with_norms(&norms), gold, &cfg);
            prop_assert!(loss >= 0.0);
            let separated = norms.iter().enumerate().all(|(l, &n)| {
                if l == gold { n >= cfg.margin_pos } else { n <= cfg.margin_neg }
            });
            prop_assert_eq!(loss == 0.0, separated);
        }

        #[test]
        fn joint_is_linear(a in -5.0f64..5.0, b in -5.0f64..5.0, beta in 0.0f64..3.0) {
            let params = ParamSet::<f64>::new();
            let mut g = Graph::new(&params);
            let s = g.constant(Tensor::scalar(a));
            let i = g.constant(Tensor::scalar(b));
            let j = joint_loss(&mut g, s, Some(i), beta).unwrap();
            prop_assert!((g.scalar(j) - (a + beta * b)).abs() < 1e-12);
        }
    }
}
