//! Slot and intent capsule layers.
//!
//! Prediction vectors are stored lower-capsule-major: word-to-slot
//! predictions are `[T, K, D_P]` and slot-to-intent predictions are
//! `[K, L, D_L]`.

mod routing;

pub use routing::{
    check_invariants, mean_entropy, route, run_rerouting, run_routing, InvariantViolation, Routing, RoutingStep,
    RoutingTrace,
};

use rand::Rng;

use crate::init::xavier_uniform;
use crate::tensor::{l2norm, Graph, ParamId, ParamSet, Real, Result, Tensor, Var};

/// Shared weight `[in, upper·dim]` and bias `[upper·dim]` for a capsule
/// layer; column block `j` holds the transform of upper capsule `j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CapsuleLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub capsules: usize,
    pub dim: usize,
}

impl CapsuleLayer {
    pub fn register<F: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<F>,
        prefix: &str,
        input_dim: usize,
        capsules: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(
            format!("{prefix}.weight"),
            xavier_uniform(&[input_dim, capsules * dim], input_dim, dim, rng),
        );
        let bias = params.add(format!("{prefix}.bias"), Tensor::zeros(&[capsules * dim]));
        Self {
            weight,
            bias,
            input_dim,
            capsules,
            dim,
        }
    }

    pub fn attach<F: Real>(params: &ParamSet<F>, prefix: &str, capsules: usize) -> Option<Self> {
        let weight = params.find(&format!("{prefix}.weight"))?;
        let bias = params.find(&format!("{prefix}.bias"))?;
        let shape = params.get(weight).shape();
        if capsules == 0 || !shape[1].is_multiple_of(capsules) {
            return None;
        }
        Some(Self {
            weight,
            bias,
            input_dim: shape[0],
            capsules,
            dim: shape[1] / capsules,
        })
    }

    /// `tanh(W_j x_i + b_j)` for every lower row `i` and capsule `j`,
    /// shaped `[rows, capsules, dim]`.
    pub fn predictions<F: Real>(&self, g: &mut Graph<'_, F>, lower: Var) -> Result<Var> {
        let rows = g.shape(lower)[0];
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let z = g.matmul(lower, w)?;
        let z = g.add_bias(z, b)?;
        let z = g.tanh(z);
        g.reshape(z, &[rows, self.capsules, self.dim])
    }
}

/// Bilinear re-routing map `W_RR` (`[D_P, D_L]`) and its coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RerouteParams {
    pub weight: ParamId,
    pub alpha: f64,
}

impl RerouteParams {
    pub const NAME: &'static str = "reroute.weight";

    pub fn register<F: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<F>,
        slot_dim: usize,
        intent_dim: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(
            Self::NAME,
            xavier_uniform(&[slot_dim, intent_dim], slot_dim, intent_dim, rng),
        );
        Self { weight, alpha }
    }

    pub fn attach<F: Real>(params: &ParamSet<F>, alpha: f64) -> Option<Self> {
        Some(Self {
            weight: params.find(Self::NAME)?,
            alpha,
        })
    }

    /// Logit bias `α · p_ijᵀ W_RR u_hat`, shaped `[lower, upper]`.
    pub fn bias<F: Real>(&self, g: &mut Graph<'_, F>, p: Var, u_hat: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.bilinear(p, w, u_hat)?;
        Ok(g.scale(b, F::from_f64(self.alpha)))
    }
}

fn argmax<F: Real>(xs: impl IntoIterator<Item = F>) -> usize {
    let mut best = 0;
    let mut best_val = F::neg_infinity();
    for (i, x) in xs.into_iter().enumerate() {
        if x > best_val {
            best = i;
            best_val = x;
        }
    }
    best
}

/// Slot decision per word: the capsule with the largest agreement.
/// `c` is `[T, K]`; positions where `mask` is false are skipped.
pub fn assign_slots<F: Real>(c: &Tensor<F>, mask: Option<&[bool]>) -> Vec<usize> {
    let k = c.shape()[c.shape().len() - 1];
    c.data()
        .chunks(k)
        .enumerate()
        .filter(|(t, _)| mask.is_none_or(|m| m[*t]))
        .map(|(_, row)| argmax(row.iter().copied()))
        .collect()
}

/// Index of the activation row with the largest norm.
pub fn predict_intent<F: Real>(u: &Tensor<F>) -> usize {
    let d = u.shape()[u.shape().len() - 1];
    argmax(u.data().chunks(d).map(l2norm))
}

/// Norms of the activation rows.
pub fn activation_norms<F: Real>(u: &Tensor<F>) -> Vec<F> {
    let d = u.shape()[u.shape().len() - 1];
    u.data().chunks(d).map(l2norm).collect()
}

/// `[lower, upper]` → `[upper, lower]`.
pub fn transpose<F: Real>(c: &Tensor<F>) -> Tensor<F> {
    let (n, m) = (c.shape()[0], c.shape()[1]);
    let mut out = vec![F::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = c.data()[i * m + j];
        }
    }
    Tensor::new(vec![m, n], out).expect("same element count")
}
