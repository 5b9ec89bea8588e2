use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DownstreamError, Result};
use crate::aligner::{gcn_forward, GcnEncoder};
use crate::seed;
use crate::tensor::{Real, SparseMatrix, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Projection width; `None` means the embedding dimension.
    pub dk: Option<usize>,
    /// Adds `h` to the attention output. Needs `dk = d`.
    pub residual: bool,
}

/// `h' = softmax(hW^Q (Z W^K)ᵀ / √d_k) · Z W^V`, optionally plus `h`.
pub fn cross_attention<T: Real>(tape: &mut Tape<T>, h: Var, z: Var, wq: Var, wk: Var, wv: Var, residual: bool) -> Result<Var> {
    let dk = tape.value(wq).cols();
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(z, wk)?;
    let v = tape.matmul(z, wv)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, T::from_f64(1.0 / (dk as f64).sqrt()))?;
    let weights = tape.softmax_rows(scaled)?;
    let out = tape.matmul(weights, v)?;
    if residual {
        return Ok(tape.add(out, h)?);
    }
    Ok(out)
}

/// Argmax with ties to the lowest class.
pub fn predict(logits: &[f32]) -> usize {
    let mut best = 0;
    for (c, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = c;
        }
    }
    best
}

/// Softmax of one logit row.
pub fn class_probabilities(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `sigmoid((a ⊙ b) · w)`.
pub fn link_score(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    let z: f64 = a.iter().zip(b).zip(w).map(|((x, y), w)| x * y * w).sum();
    1.0 / (1.0 + (-z).exp())
}

/// Encoder, fusion projections and task head. `params` holds the encoder
/// tensors first, then `W^Q`, `W^K`, `W^V` and the head; the codebook is a
/// frozen input.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    pub params: Vec<Tensor<T>>,
    pub codebook: Tensor<T>,
    pub residual: bool,
}

fn glorot<T: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
    Ok(Tensor::matrix(rows, cols, data)?)
}

/// Initial attention sharpness: with square projections the starting logits
/// are `ATTENTION_TEMPERATURE · cos(h, z)`, i.e. a soft nearest-prototype
/// lookup in the aligned space.
pub const ATTENTION_TEMPERATURE: f64 = 4.0;

/// Square projections start at `scale · I` plus small noise; rectangular ones
/// are Glorot-uniform.
fn projection<T: Real>(d: usize, dk: usize, scale: f64, rng: &mut impl Rng) -> Result<Tensor<T>> {
    if d != dk {
        return glorot(d, dk, rng);
    }
    let mut w = Tensor::<T>::identity(d);
    for v in w.data_mut() {
        *v = T::from_f64(v.as_f64() * scale + rng.random_range(-0.01..0.01));
    }
    Ok(w)
}

/// Initial link head scale: the starting score is `LINK_HEAD_SCALE · ⟨h'_a, h'_b⟩`.
pub const LINK_HEAD_SCALE: f64 = 4.0;

fn link_head<T: Real>(dk: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let data = (0..dk).map(|_| T::from_f64(LINK_HEAD_SCALE + rng.random_range(-0.01..0.01))).collect();
    Ok(Tensor::matrix(dk, 1, data)?)
}

impl<T: Real> Model<T> {
    /// Fresh projections and head around an encoder and codebook.
    /// `outputs` is the class count, or 1 for link scoring.
    pub fn new(encoder: GcnEncoder<T>, codebook: Tensor<T>, fusion: &FusionConfig, outputs: usize, seed: u64) -> Result<Self> {
        let d = encoder.dim();
        if codebook.shape().len() != 2 || codebook.rows() == 0 {
            return Err(DownstreamError::Config("empty codebook".into()));
        }
        if codebook.cols() != d {
            return Err(TensorError::Shape {
                op: "fusion",
                lhs: vec![d],
                rhs: codebook.shape().to_vec(),
            }
            .into());
        }
        let dk = fusion.dk.unwrap_or(d);
        if dk == 0 || outputs == 0 {
            return Err(DownstreamError::Config("d_k and output width must be positive".into()));
        }
        if fusion.residual && dk != d {
            return Err(DownstreamError::Config("the residual variant needs d_k equal to the embedding dimension".into()));
        }
        let mut rng = seed::rng(seed, "fusion/init");
        let mut params = encoder.params;
        let qk = (ATTENTION_TEMPERATURE * (dk as f64).sqrt()).sqrt();
        params.push(projection(d, dk, qk, &mut rng)?);
        params.push(projection(d, dk, qk, &mut rng)?);
        params.push(projection(d, dk, 1.0, &mut rng)?);
        params.push(if outputs == 1 {
            link_head(dk, &mut rng)?
        } else {
            glorot(dk, outputs, &mut rng)?
        });
        Ok(Self {
            params,
            codebook,
            residual: fusion.residual,
        })
    }

    pub fn encoder_len(&self) -> usize {
        self.params.len() - 4
    }

    pub fn encoder(&self) -> GcnEncoder<T> {
        GcnEncoder {
            params: self.params[..self.encoder_len()].to_vec(),
        }
    }

    pub fn head(&self) -> &Tensor<T> {
        &self.params[self.params.len() - 1]
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

    pub fn constants(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Returns `(h, h')`: encoder output and fused representation.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, adj: Arc<SparseMatrix<T>>) -> Result<(Var, Var)> {
        let e = self.encoder_len();
        let h = gcn_forward(tape, &vars[..e], x, adj)?;
        let z = tape.constant(self.codebook.clone());
        let fused = cross_attention(tape, h, z, vars[e], vars[e + 1], vars[e + 2], self.residual)?;
        Ok((h, fused))
    }

    /// Class logits for every node.
    pub fn node_logits(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, adj: Arc<SparseMatrix<T>>) -> Result<Var> {
        let (_, fused) = self.forward(tape, vars, x, adj)?;
        Ok(tape.matmul(fused, vars[vars.len() - 1])?)
    }

    /// Link logits `(h'_a ⊙ h'_b)·W` for each pair.
    pub fn link_logits(&self, tape: &mut Tape<T>, vars: &[Var], fused: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (a, b): (Vec<usize>, Vec<usize>) = pairs.iter().cloned().unzip();
        let ha = tape.gather_rows(fused, &a)?;
        let hb = tape.gather_rows(fused, &b)?;
        let prod = tape.mul(ha, hb)?;
        Ok(tape.matmul(prod, vars[vars.len() - 1])?)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            params: self.params.iter().map(Tensor::cast).collect(),
            codebook: self.codebook.cast(),
            residual: self.residual,
        }
    }
}
