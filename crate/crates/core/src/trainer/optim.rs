use serde::{Deserialize, Serialize};

use crate::tensor::{Gradients, ParamSet, Real};

/// RMSProp with a running mean of squared gradients:
/// `acc ← decay·acc + (1−decay)·g²`, `p ← p − lr·g/(√acc + eps)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real")]
pub struct RmsProp<F> {
    pub learning_rate: F,
    pub decay: F,
    pub epsilon: F,
    accumulators: Vec<Vec<F>>,
}

impl<F: Real> RmsProp<F> {
    pub fn new(params: &ParamSet<F>, learning_rate: F, decay: F, epsilon: F) -> Self {
        Self {
            learning_rate,
            decay,
            epsilon,
            accumulators: params.ids().map(|id| vec![F::zero(); params.get(id).numel()]).collect(),
        }
    }

    pub fn accumulator(&self, index: usize) -> &[F] {
        &self.accumulators[index]
    }

    /// Updates every parameter that is not in `skip`.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &Gradients<F>, skip: &[crate::tensor::ParamId]) {
        let keep = F::one() - self.decay;
        for id in params.ids().collect::<Vec<_>>() {
            if skip.contains(&id) {
                continue;
            }
            let acc = &mut self.accumulators[id.index()];
            let g = grads.get(id);
            for ((p, a), &g) in params.get_mut(id).data_mut().iter_mut().zip(acc.iter_mut()).zip(g) {
                *a = self.decay * *a + keep * g * g;
                *p -= self.learning_rate * g / (a.sqrt() + self.epsilon);
            }
        }
    }
}

/// Single-value form of the update, for reference traces.
pub fn rmsprop_scalar(p: f64, g: f64, acc: f64, lr: f64, decay: f64, eps: f64) -> (f64, f64) {
    let acc = decay * acc + (1.0 - decay) * g * g;
    (p - lr * g / (acc.sqrt() + eps), acc)
}
