//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Values live in row-major [`Tensor`]s. A [`Graph`] records every operation
//! applied during a forward pass; [`Graph::backward`] walks the record in
//! reverse and accumulates gradients into tracked leaves and into a
//! [`Gradients`] buffer for model parameters held in a [`ParamSet`].
//!
//! ```
//! use capsule_nlu::tensor::{Graph, ParamSet, Gradients, Tensor};
//!
//! let params = ParamSet::<f64>::new();
//! let mut grads = Gradients::zeros_like(&params);
//! let mut g = Graph::new(&params);
//! let x = g.leaf(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! g.backward(y, &mut grads).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[6.0]);
//! ```

mod check;
mod graph;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use check::{grad_check, param_grad_check, ParamCheck};
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamId, ParamSet};

/// Floating point element type. Training runs in `f32`, verification in `f64`.
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// `c (m×n) = beta·c + a (m×k) · b (k×n)`, with either operand optionally
    /// stored transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
                let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above bound every index touched by the
                // strides chosen for an m×k by k×n product into m×n.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: empty tensor")]
    Empty { op: &'static str },
    #[error("shape {shape:?} does not hold {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("invalid argument: {0}")]
    Invalid(&'static str),
    #[error("{op}: index {index} out of range for extent {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real")]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) || numel != data.len() {
            return Err(TensorError::InvalidShape { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
        }
    }

    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::ShapeMismatch {
                op: "from_rows",
                left: vec![cols],
                right: rows.iter().map(Vec::len).collect(),
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Element of a rank-2 tensor.
    pub fn at(&self, row: usize, col: usize) -> F {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[F] {
        let cols = self.shape[1..].iter().product::<usize>();
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Maps a vector onto the same direction with norm `‖s‖²/(1+‖s‖²)`.
/// The zero vector maps to itself.
pub fn squash<F: Real>(s: &[F]) -> Vec<F> {
    let mut out = vec![F::zero(); s.len()];
    squash_into(s, &mut out);
    out
}

pub(crate) fn squash_into<F: Real>(s: &[F], out: &mut [F]) {
    let mut sq = F::zero();
    for &x in s {
        sq += x * x;
    }
    if sq == F::zero() {
        out.iter_mut().for_each(|o| *o = F::zero());
        return;
    }
    let norm = sq.sqrt();
    let scale = sq / (F::one() + sq) / norm;
    for (o, &x) in out.iter_mut().zip(s) {
        *o = scale * x;
    }
}

/// Numerically stable softmax of one row.
pub fn softmax<F: Real>(x: &[F]) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    softmax_into(x, &mut out);
    out
}

pub(crate) fn softmax_into<F: Real>(x: &[F], out: &mut [F]) {
    let mut max = F::neg_infinity();
    for &v in x {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += o.as_f64();
    }
    let sum = F::from_f64(sum);
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

pub fn l2norm<F: Real>(x: &[F]) -> F {
    let mut sq = F::zero();
    for &v in x {
        sq += v * v;
    }
    sq.sqrt()
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
