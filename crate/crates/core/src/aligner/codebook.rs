use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{AlignError, Result};
use crate::selector::kmeans;
use crate::graph::EmbeddingTable;
use crate::seed;
use crate::tensor::Tensor;

/// Index of the nearest row of `protos` (`k_p×d`); ties go to the lower
/// index.
pub fn vq_map(row: &[f32], protos: &Tensor<f32>) -> Result<usize> {
    if protos.numel() == 0 || protos.shape().len() != 2 {
        return Err(AlignError::EmptyCodebook);
    }
    if protos.cols() != row.len() {
        return Err(AlignError::Tensor(crate::tensor::TensorError::Shape {
            op: "vq_map",
            lhs: vec![row.len()],
            rhs: protos.shape().to_vec(),
        }));
    }
    let mut best = (f64::INFINITY, 0);
    for j in 0..protos.rows() {
        let d: f64 = row
            .iter()
            .zip(protos.row(j))
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum();
        if d < best.0 {
            best = (d, j);
        }
    }
    Ok(best.1)
}

/// Prototype matrix `Z_a` with exponential-moving-average updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub protos: Tensor<f32>,
    pub counts: Vec<f64>,
    /// Consecutive updates in which each prototype received no rows.
    pub idle: Vec<u32>,
    pub gamma: f64,
    pub reseed_after: u32,
}

impl Codebook {
    pub fn new(protos: Tensor<f32>, gamma: f64) -> Result<Self> {
        if protos.shape().len() != 2 || protos.rows() == 0 {
            return Err(AlignError::EmptyCodebook);
        }
        let k = protos.rows();
        Ok(Self {
            protos,
            counts: vec![1.0; k],
            idle: vec![0; k],
            gamma,
            reseed_after: 50,
        })
    }

    pub fn k(&self) -> usize {
        self.protos.rows()
    }

    pub fn assign(&self, rows: &Tensor<f32>) -> Result<Vec<usize>> {
        (0..rows.rows()).map(|i| vq_map(rows.row(i), &self.protos)).collect()
    }

    /// Rows of the assigned prototypes, stacked.
    pub fn quantize(&self, assignment: &[usize]) -> Tensor<f32> {
        let rows: Vec<Vec<f32>> = assignment.iter().map(|&j| self.protos.row(j).to_vec()).collect();
        Tensor::from_rows(&rows).expect("prototype rows share a width")
    }

    /// k-means centers of `pool`. When `pool` has fewer distinct rows than
    /// `k`, the remaining prototypes are pool rows plus small seeded noise.
    pub fn from_pool(pool: &Tensor<f32>, k: usize, gamma: f64, seed: u64) -> Result<Self> {
        if k == 0 || pool.rows() == 0 {
            return Err(AlignError::EmptyCodebook);
        }
        let d = pool.cols();
        let mut distinct: Vec<Vec<f32>> = Vec::new();
        for i in 0..pool.rows() {
            if !distinct.iter().any(|r| r.as_slice() == pool.row(i)) {
                distinct.push(pool.row(i).to_vec());
            }
        }
        let k_fit = k.min(distinct.len());
        let table = EmbeddingTable::new(d, pool.data().to_vec(), "pool")?;
        let clustering = kmeans(&table, k_fit, 100, seed)?;
        let mut rows: Vec<Vec<f32>> = clustering
            .centers
            .iter()
            .map(|c| c.iter().map(|v| *v as f32).collect())
            .collect();
        if rows.len() < k {
            log::warn!("codebook of {k} prototypes initialized from {} distinct rows; padding with perturbed copies", distinct.len());
            let mut rng = seed::rng(seed, "codebook/pad");
            let noise = Normal::new(0.0, 0.01).expect("valid normal");
            while rows.len() < k {
                let base = &distinct[rng.random_range(0..distinct.len())];
                rows.push(base.iter().map(|v| v + noise.sample(&mut rng) as f32).collect());
            }
        }
        Self::new(Tensor::from_rows(&rows)?, gamma)
    }

    /// EMA step: `c_j ← γc_j + (1−γ)n_j`,
    /// `Z_j ← (γ c_j^old Z_j + (1−γ) Σ assigned rows) / c_j`. Prototypes idle
    /// for more than `reseed_after` steps move to a random batch row.
    pub fn update(&mut self, batch: &Tensor<f32>, assignment: &[usize], rng: &mut impl Rng) {
        let (k, d, g) = (self.k(), self.protos.cols(), self.gamma);
        let mut sums = vec![vec![0f64; d]; k];
        let mut n = vec![0usize; k];
        for (i, &j) in assignment.iter().enumerate() {
            n[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(batch.row(i)) {
                *s += *v as f64;
            }
        }
        for j in 0..k {
            let old = self.counts[j];
            let new = g * old + (1.0 - g) * n[j] as f64;
            if n[j] > 0 && new > 0.0 {
                let row = self.protos.row_mut(j);
                for (z, s) in row.iter_mut().zip(&sums[j]) {
                    *z = ((g * old * *z as f64 + (1.0 - g) * s) / new) as f32;
                }
                self.idle[j] = 0;
            } else {
                self.idle[j] += 1;
            }
            self.counts[j] = new;
            if self.idle[j] > self.reseed_after && batch.rows() > 0 {
                let pick = rng.random_range(0..batch.rows());
                self.protos.row_mut(j).copy_from_slice(batch.row(pick));
                self.counts[j] = 1.0;
                self.idle[j] = 0;
            }
        }
    }
}
