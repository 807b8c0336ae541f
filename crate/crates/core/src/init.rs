//! Parameter initializers.

use rand::Rng;

use crate::tensor::{Real, Tensor};

/// Glorot/Xavier uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<F: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = F::from_f64(rng.gen_range(-bound..bound));
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn stays_within_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = xavier_uniform(&[20, 30], 20, 30, &mut rng);
        let bound = (6.0f64 / 50.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < bound));
        assert!(t.data().iter().any(|v| v.abs() > bound / 2.0));
    }
}
