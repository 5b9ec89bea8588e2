//! Dense row-major tensors, a reverse-mode differentiation tape, the Adam
//! optimizer and a flat checkpoint container.
//!
//! Models run in `f32`. The same code paths are generic over [`Real`] so
//! finite-difference checks can evaluate them in `f64`.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod sparse;
mod tape;

use std::fmt::{Debug, Display};

use num_traits::Float;
use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, grad_check_many, relative_error};
pub use sparse::SparseMatrix;
pub use tape::{Tape, Var};

/// Floating point element type usable on a [`Tape`].
pub trait Real: Float + Default + Debug + Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn dtype() -> &'static str;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn dtype() -> &'static str {
        "f32"
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn dtype() -> &'static str {
        "f64"
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Row-major dense tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Contract(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Shape {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::Shape {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    /// Number of rows when viewed as a matrix (leading dimension).
    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Number of columns when viewed as a matrix (product of trailing dims).
    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            self.data.len()
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(TensorError::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        let g = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (a, &b) in g.iter_mut().zip(delta) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    pub fn transpose(&self) -> Tensor<T> {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
            requires_grad: false,
            grad: None,
        }
    }

    /// Plain (untracked) matrix product.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.cols() != rhs.rows() {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), rhs.cols());
        Tensor::matrix(m, n, kernels::matmul(&self.data, &rhs.data, m, k, n))
    }
}

pub(crate) mod kernels {
    use super::Real;

    /// `a[m×k] · b[k×n]` with f64 accumulation.
    pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); m * n];
        let mut acc = vec![0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for p in 0..k {
                let av = a[i * k + p].as_f64();
                if av == 0.0 {
                    continue;
                }
                for (s, bv) in acc.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *s += av * bv.as_f64();
                }
            }
            for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
                *o = T::from_f64(*s);
            }
        }
        out
    }

    /// `a[m×n] · b[k×n]ᵀ`.
    pub fn matmul_bt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
        let mut out = vec![T::zero(); m * k];
        for i in 0..m {
            let ar = &a[i * n..(i + 1) * n];
            for p in 0..k {
                let br = &b[p * n..(p + 1) * n];
                let s: f64 = ar.iter().zip(br).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
                out[i * k + p] = T::from_f64(s);
            }
        }
        out
    }

    /// `a[m×k]ᵀ · b[m×n]`.
    pub fn matmul_at<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
        let mut acc = vec![0f64; k * n];
        for i in 0..m {
            let br = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p].as_f64();
                if av == 0.0 {
                    continue;
                }
                for (s, bv) in acc[p * n..(p + 1) * n].iter_mut().zip(br) {
                    *s += av * bv.as_f64();
                }
            }
        }
        acc.into_iter().map(T::from_f64).collect()
    }
}
