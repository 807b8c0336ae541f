use serde::{Deserialize, Serialize};

use super::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real")]
struct NamedParam<F> {
    name: String,
    value: Tensor<F>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real")]
pub struct ParamSet<F> {
    entries: Vec<NamedParam<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "parameter {name} registered twice");
        self.entries.push(NamedParam { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.is_finite())
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| NamedParam {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Dense gradient buffers laid out like a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F> {
    buffers: Vec<Vec<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros_like(params: &ParamSet<F>) -> Self {
        Self {
            buffers: params
                .entries
                .iter()
                .map(|p| vec![F::zero(); p.value.numel()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.buffers[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.buffers[id.0]
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    pub fn zero(&mut self) {
        for b in &mut self.buffers {
            b.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    pub fn scale(&mut self, factor: F) {
        for b in &mut self.buffers {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> F {
        let mut sq = 0.0f64;
        for b in &self.buffers {
            for &v in b {
                let v = v.as_f64();
                sq += v * v;
            }
        }
        F::from_f64(sq.sqrt())
    }

    /// Rescales all buffers so their joint L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: F) -> F {
        let norm = self.global_norm();
        if norm > max_norm && norm > F::zero() {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.buffers.iter().flatten().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_caps_global_norm() {
        let mut p = ParamSet::<f64>::new();
        let a = p.add("a", Tensor::zeros(&[2]));
        let b = p.add("b", Tensor::zeros(&[1]));
        let mut g = Gradients::zeros_like(&p);
        g.get_mut(a).copy_from_slice(&[3.0, 0.0]);
        g.get_mut(b).copy_from_slice(&[4.0]);
        assert_eq!(g.clip_global_norm(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        assert!((g.get(a)[0] - 0.6).abs() < 1e-12);
        assert_eq!(g.clip_global_norm(10.0), g.global_norm());
    }

    #[test]
    fn lookup_by_name() {
        let mut p = ParamSet::<f32>::new();
        let id = p.add("w", Tensor::zeros(&[2, 2]));
        assert_eq!(p.find("w"), Some(id));
        assert_eq!(p.find("x"), None);
        assert_eq!(p.name(id), "w");
        assert_eq!(p.num_values(), 4);
    }
}
