//! Prototype cross-attention fusion, classification and link heads,
//! fine-tuning and link-prediction metrics.

mod finetune;
mod metrics;
mod model;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::aligner::AlignError;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::TensorError;

pub use finetune::{
    evaluate_link, evaluate_node, finetune_link, finetune_node, link_metrics, link_scores, prototype_distances, EvalReport, FinetuneConfig, FinetuneOutput, SplitMetrics, Task,
    TrainLogRow,
};
pub use metrics::{auc, mrr_at_10, pessimistic_rank, random_mrr_at_10};
pub use model::{class_probabilities, cross_attention, link_score, predict, FusionConfig, Model};

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error("task mismatch: {0}")]
    TaskMismatch(String),
    #[error("{0} needs non-empty input")]
    EmptyMetricInput(&'static str),
    #[error("invalid metric input: {0}")]
    InvalidMetricInput(String),
    #[error("fine-tune configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DownstreamError> = std::result::Result<T, E>;

pub fn write_train_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,valid_metric\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.valid_metric);
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_prototype_distances(path: &Path, rows: &[(usize, f64)]) -> Result<()> {
    let mut out = String::from("node,prototype,distance\n");
    for (v, (j, d)) in rows.iter().enumerate() {
        let _ = writeln!(out, "{v},{j},{d}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

impl Model {
    /// Tensors `param.<i>` and `codebook`, with `residual` in the metadata.
    pub fn save(&self, dir: &Path, mut metadata: BTreeMap<String, String>) -> Result<()> {
        metadata.insert("residual".into(), self.residual.to_string());
        let mut ck = Checkpoint {
            metadata,
            ..Checkpoint::default()
        };
        for (i, p) in self.params.iter().enumerate() {
            let mut p = p.clone();
            p.clear_grad();
            p.set_requires_grad(false);
            ck.insert(format!("param.{i:02}"), p);
        }
        ck.insert("codebook", self.codebook.clone());
        ck.save(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let ck = Checkpoint::load(dir)?;
        let mut params = Vec::new();
        while let Some(p) = ck.tensors.get(&format!("param.{:02}", params.len())) {
            params.push(p.clone());
        }
        if params.len() < 6 {
            return Err(DownstreamError::Config(format!("checkpoint holds only {} parameters", params.len())));
        }
        let residual = ck.metadata.get("residual").map(String::as_str) == Some("true");
        let model = Self {
            params,
            codebook: ck.get("codebook")?.clone(),
            residual,
        };
        model.encoder_checked()?;
        Ok((model, ck.metadata))
    }

    fn encoder_checked(&self) -> Result<()> {
        crate::aligner::GcnEncoder::from_params(self.params[..self.encoder_len()].to_vec())?;
        Ok(())
    }
}
