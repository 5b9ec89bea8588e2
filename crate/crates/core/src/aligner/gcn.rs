use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Result;
use crate::seed;
use crate::tensor::{Real, SparseMatrix, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Standard deviation of the noise added to the identity adapter.
    pub adapter_noise: f64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 64,
            adapter_noise: 0.01,
        }
    }
}

/// Trainable `d×d` input adapter followed by `layers` graph convolutions
/// `d → hidden → … → hidden → d`. `params[0]` is the adapter, `params[1..]`
/// the layer weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnEncoder<T: Real = f32> {
    pub params: Vec<Tensor<T>>,
}

impl<T: Real> GcnEncoder<T> {
    pub fn new(dim: usize, config: &GcnConfig, seed: u64) -> Result<Self> {
        if config.layers == 0 || dim == 0 || config.hidden == 0 {
            return Err(TensorError::Contract("encoder needs at least one layer and positive widths".into()).into());
        }
        let mut rng = seed::rng(seed, "gcn/init");
        let noise = Normal::new(0.0, config.adapter_noise).map_err(|e| TensorError::Contract(e.to_string()))?;
        let mut adapter = Tensor::<T>::identity(dim);
        for v in adapter.data_mut() {
            *v = *v + T::from_f64(noise.sample(&mut rng));
        }
        let mut params = vec![adapter];
        let mut dims = vec![dim];
        dims.extend(std::iter::repeat_n(config.hidden, config.layers - 1));
        dims.push(dim);
        for w in dims.windows(2) {
            let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let data = (0..w[0] * w[1]).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
            params.push(Tensor::matrix(w[0], w[1], data)?);
        }
        Ok(Self { params })
    }

    pub fn from_params(params: Vec<Tensor<T>>) -> Result<Self> {
        let enc = Self { params };
        let dim = enc.dim();
        let mut prev = dim;
        if enc.params.len() < 2 || enc.params[0].shape() != [dim, dim] {
            return Err(TensorError::Contract("encoder needs a square adapter and a layer".into()).into());
        }
        for w in &enc.params[1..] {
            if w.shape().len() != 2 || w.rows() != prev {
                return Err(TensorError::Contract(format!("layer shape {:?} does not chain from {prev}", w.shape())).into());
            }
            prev = w.cols();
        }
        if prev != dim {
            return Err(TensorError::Contract("last layer must map back to the input dimension".into()).into());
        }
        Ok(enc)
    }

    pub fn dim(&self) -> usize {
        self.params[0].rows()
    }

    pub fn layers(&self) -> usize {
        self.params.len() - 1
    }

    pub fn leaves(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let mut p = p.clone();
                p.clear_grad();
                tape.leaf(p.with_grad())
            })
            .collect()
    }

    /// Row-normalized embeddings of `x` over `adj`, without gradients.
    pub fn embed(&self, x: &Tensor<T>, adj: Arc<SparseMatrix<T>>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let xv = tape.constant(x.clone());
        let out = gcn_forward(&mut tape, &params, xv, adj)?;
        Ok(tape.value(out).clone())
    }
}

/// Layer stack before the final row normalization: `H₀ = X·adapter`,
/// `H_{ℓ+1} = ReLU(Â H_ℓ W_ℓ)`, last layer without ReLU.
pub fn gcn_forward_raw<T: Real>(tape: &mut Tape<T>, params: &[Var], x: Var, adj: Arc<SparseMatrix<T>>) -> Result<Var> {
    let (adapter, layers) = params
        .split_first()
        .ok_or_else(|| TensorError::Contract("encoder without parameters".into()))?;
    if tape.value(x).rows() != adj.rows() {
        return Err(TensorError::Shape {
            op: "gcn_forward",
            lhs: tape.value(x).shape().to_vec(),
            rhs: vec![adj.rows(), adj.cols()],
        }
        .into());
    }
    let mut h = tape.matmul(x, *adapter)?;
    for (l, &w) in layers.iter().enumerate() {
        let hw = tape.matmul(h, w)?;
        h = tape.spmm(adj.clone(), hw)?;
        if l + 1 < layers.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

pub fn gcn_forward<T: Real>(tape: &mut Tape<T>, params: &[Var], x: Var, adj: Arc<SparseMatrix<T>>) -> Result<Var> {
    let h = gcn_forward_raw(tape, params, x, adj)?;
    Ok(tape.l2_normalize_rows(h)?)
}
