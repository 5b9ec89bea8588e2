//! Text/annotation alignment: paired subgraph sampling, a shared GCN
//! encoder, the two-level contrastive objective and the prototype codebook.

mod codebook;
mod gcn;
mod loss;
mod subgraph;
mod train;

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::graph::GraphError;
use crate::selector::{SelectError, Target};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Tensor, TensorError};

pub use codebook::{vq_map, Codebook};
pub use gcn::{gcn_forward, gcn_forward_raw, GcnConfig, GcnEncoder};
pub use loss::{loss_combined, loss_eq1};
pub use subgraph::{k_hop, normalized_adjacency, sample_subgraph_pair, Subgraph, SubgraphPair, DEFAULT_NODE_CAP};
pub use train::{align_train, pair_distances, AlignConfig, Alignment, EpochLoss};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("the contrastive loss needs at least 2 seeds, got {0}")]
    TooFewSeeds(usize),
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),
    #[error("empty prototype codebook")]
    EmptyCodebook,
    #[error("seed {0:?} has no annotation")]
    NotAnnotated(Target),
    #[error("alignment checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AlignError> = std::result::Result<T, E>;

impl Alignment {
    /// Tensor container with `adapter`, `gcn.<l>`, `codebook.protos`,
    /// `codebook.counts` and `codebook.idle`, plus `align_log.json`.
    pub fn save(&self, dir: &Path, metadata: BTreeMap<String, String>) -> Result<()> {
        let mut ck = Checkpoint {
            metadata,
            ..Checkpoint::default()
        };
        ck.metadata.insert("gamma".into(), self.codebook.gamma.to_string());
        ck.metadata.insert("reseed_after".into(), self.codebook.reseed_after.to_string());
        ck.insert("adapter", self.encoder.params[0].clone());
        for (l, w) in self.encoder.params[1..].iter().enumerate() {
            ck.insert(format!("gcn.{l}"), w.clone());
        }
        let k = self.codebook.k();
        ck.insert("codebook.protos", self.codebook.protos.clone());
        ck.insert(
            "codebook.counts",
            Tensor::new(vec![k], self.codebook.counts.iter().map(|c| *c as f32).collect())?,
        );
        ck.insert(
            "codebook.idle",
            Tensor::new(vec![k], self.codebook.idle.iter().map(|c| *c as f32).collect())?,
        );
        ck.save(dir)?;
        std::fs::write(dir.join("align_log.json"), serde_json::to_string_pretty(&self.log)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let ck = Checkpoint::load(dir)?;
        let meta = |key: &str| {
            ck.metadata
                .get(key)
                .ok_or_else(|| AlignError::Checkpoint(format!("missing metadata {key}")))
        };
        let gamma: f64 = meta("gamma")?.parse().map_err(|e| AlignError::Checkpoint(format!("gamma: {e}")))?;
        let reseed_after: u32 = meta("reseed_after")?
            .parse()
            .map_err(|e| AlignError::Checkpoint(format!("reseed_after: {e}")))?;
        let mut params = vec![ck.get("adapter")?.clone()];
        let mut l = 0;
        while let Some(w) = ck.tensors.get(&format!("gcn.{l}")) {
            params.push(w.clone());
            l += 1;
        }
        let encoder = GcnEncoder::from_params(params)?;
        let mut codebook = Codebook::new(ck.get("codebook.protos")?.clone(), gamma)?;
        codebook.reseed_after = reseed_after;
        codebook.counts = ck.get("codebook.counts")?.data().iter().map(|c| *c as f64).collect();
        codebook.idle = ck.get("codebook.idle")?.data().iter().map(|c| *c as u32).collect();
        let log = serde_json::from_str(&std::fs::read_to_string(dir.join("align_log.json"))?)?;
        Ok((Self { encoder, codebook, log }, ck.metadata))
    }
}
