use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{auc, mrr_at_10, pessimistic_rank};
use super::model::{predict, FusionConfig, Model};
use super::{DownstreamError, Result};
use crate::aligner::{normalized_adjacency, Codebook, GcnEncoder};
use crate::graph::{EdgeSplit, EmbeddingTable, NodeId, Split, Tag};
use crate::seed;
use crate::tensor::{Adam, AdamConfig, SparseMatrix, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Node,
    Link,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub fusion: FusionConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            patience: 20,
            fusion: FusionConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mrr_at_10: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

/// Metrics of the best-validation model. Wall time and memory live in a
/// separate gauges file so reports stay reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub config_hash: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub splits: BTreeMap<String, SplitMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation metric of the parameters the epoch started from.
    pub valid_metric: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutput {
    pub model: Model,
    pub report: EvalReport,
    pub log: Vec<TrainLogRow>,
}

fn features(emb: &EmbeddingTable) -> Result<Tensor<f32>> {
    Ok(Tensor::matrix(emb.count(), emb.dim(), emb.data().to_vec())?)
}

fn check_inputs(tag: &Tag, emb: &EmbeddingTable) -> Result<()> {
    if emb.count() != tag.num_nodes() {
        return Err(DownstreamError::Config(format!(
            "{} embeddings for {} nodes",
            emb.count(),
            tag.num_nodes()
        )));
    }
    Ok(())
}

fn copy_grads(model: &mut Model, tape: &Tape<f32>, vars: &[crate::tensor::Var]) -> Result<()> {
    for (p, v) in model.params.iter_mut().zip(vars) {
        p.clear_grad();
        if let Some(g) = tape.grad(*v) {
            p.accumulate_grad(g)?;
        }
    }
    Ok(())
}

fn accuracy(logits: &Tensor<f32>, tag: &Tag, nodes: &[NodeId]) -> Option<f64> {
    if nodes.is_empty() {
        return None;
    }
    let correct = nodes
        .iter()
        .filter(|&&v| Some(predict(logits.row(v))) == tag.label(v))
        .count();
    Some(correct as f64 / nodes.len() as f64)
}

/// Early-stopping bookkeeping: keeps the first parameters reaching the best
/// validation metric.
struct Best {
    metric: f64,
    epoch: usize,
    params: Vec<Tensor<f32>>,
    since: usize,
}

impl Best {
    fn offer(&mut self, metric: f64, epoch: usize, params: &[Tensor<f32>]) {
        if metric > self.metric {
            self.metric = metric;
            self.epoch = epoch;
            self.params = params.to_vec();
            self.since = 0;
        } else {
            self.since += 1;
        }
    }
}

/// Full-batch cross-entropy on the training split, early stopping on
/// validation accuracy. Epoch `e` reports the metric of the parameters after
/// `e` updates; the best of these is returned.
pub fn finetune_node(
    tag: &Tag,
    text_emb: &EmbeddingTable,
    encoder: &GcnEncoder,
    codebook: &Codebook,
    config: &FinetuneConfig,
    config_hash: &str,
) -> Result<FinetuneOutput> {
    check_inputs(tag, text_emb)?;
    let train = tag.nodes_in(Split::Train);
    let valid = tag.nodes_in(Split::Valid);
    if !tag.has_labels() || train.is_empty() || valid.is_empty() {
        return Err(DownstreamError::TaskMismatch("node classification needs labeled train and valid nodes".into()));
    }
    let targets: Vec<usize> = train.iter().map(|&v| tag.label(v).expect("train nodes are labeled")).collect();
    let x = features(text_emb)?;
    let adj: Arc<SparseMatrix<f32>> = Arc::new(normalized_adjacency(tag.num_nodes(), &tag.edges()));
    let mut model = Model::new(encoder.clone(), codebook.protos.clone(), &config.fusion, tag.num_classes(), config.seed)?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &model.params);

    let mut best = Best {
        metric: f64::NEG_INFINITY,
        epoch: 0,
        params: model.params.clone(),
        since: 0,
    };
    let mut log = Vec::new();
    let mut epochs_run = 0;
    for epoch in 0..=config.epochs {
        let mut tape = Tape::new();
        let train_step = epoch < config.epochs;
        let vars = if train_step { model.leaves(&mut tape) } else { model.constants(&mut tape) };
        let xv = tape.constant(x.clone());
        let logits = model.node_logits(&mut tape, &vars, xv, adj.clone())?;
        let val = accuracy(tape.value(logits), tag, &valid).expect("valid split is non-empty");
        best.offer(val, epoch, &model.params);
        if !train_step || best.since >= config.patience {
            break;
        }
        let sel = tape.gather_rows(logits, &train)?;
        let loss = tape.cross_entropy(sel, &targets)?;
        let loss_value = tape.value(loss).data()[0] as f64;
        tape.backward(loss)?;
        copy_grads(&mut model, &tape, &vars)?;
        adam.step(&mut model.params)?;
        epochs_run = epoch + 1;
        log.push(TrainLogRow {
            epoch: epoch + 1,
            train_loss: loss_value,
            valid_metric: val,
        });
    }

    model.params = best.params;
    let splits = evaluate_node(&model, tag, text_emb)?;
    Ok(FinetuneOutput {
        model,
        report: EvalReport {
            task: Task::Node,
            config_hash: config_hash.to_string(),
            epochs_run,
            best_epoch: best.epoch,
            splits,
        },
        log,
    })
}

/// Logit for every pair given fused representations.
fn pair_scores(model: &Model, fused: &Tensor<f32>, pairs: &[(usize, usize)]) -> Vec<f64> {
    let w = model.head().data();
    pairs
        .iter()
        .map(|&(a, b)| {
            fused
                .row(a)
                .iter()
                .zip(fused.row(b))
                .zip(w)
                .map(|((x, y), w)| *x as f64 * *y as f64 * *w as f64)
                .sum()
        })
        .collect()
}

/// MRR@10 over per-positive negative lists, and AUC of all positives against
/// all listed negatives.
pub fn link_metrics(pos_scores: &[f64], neg_scores: &[Vec<f64>]) -> Result<(f64, f64)> {
    let ranks: Vec<usize> = pos_scores
        .iter()
        .zip(neg_scores)
        .map(|(p, negs)| pessimistic_rank(*p, negs))
        .collect();
    let flat: Vec<f64> = neg_scores.iter().flatten().cloned().collect();
    Ok((mrr_at_10(&ranks)?, auc(pos_scores, &flat)?))
}

fn evaluate_links(model: &Model, fused: &Tensor<f32>, pos: &[(usize, usize)], negs: &[Vec<(usize, usize)>]) -> Result<(f64, f64)> {
    let p = pair_scores(model, fused, pos);
    let n: Vec<Vec<f64>> = negs.iter().map(|l| pair_scores(model, fused, l)).collect();
    link_metrics(&p, &n)
}

/// Trains on the split's training edges with one fresh uniform non-edge per
/// positive each epoch; early stopping on validation MRR@10. Message passing
/// sees training edges only.
pub fn finetune_link(
    tag: &Tag,
    split: &EdgeSplit,
    text_emb: &EmbeddingTable,
    encoder: &GcnEncoder,
    codebook: &Codebook,
    config: &FinetuneConfig,
    config_hash: &str,
) -> Result<FinetuneOutput> {
    check_inputs(tag, text_emb)?;
    if split.train.is_empty() || split.valid.is_empty() || split.test.is_empty() {
        return Err(DownstreamError::TaskMismatch("link prediction needs train, valid and test edges".into()));
    }
    let n = tag.num_nodes();
    let train_set: BTreeSet<(usize, usize)> = split.train.iter().cloned().collect();
    let x = features(text_emb)?;
    let adj: Arc<SparseMatrix<f32>> = Arc::new(normalized_adjacency(n, &split.train));
    let mut model = Model::new(encoder.clone(), codebook.protos.clone(), &config.fusion, 1, config.seed)?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &model.params);
    let mut rng = seed::rng(config.seed, "link/negatives");

    let mut best = Best {
        metric: f64::NEG_INFINITY,
        epoch: 0,
        params: model.params.clone(),
        since: 0,
    };
    let mut log = Vec::new();
    let mut epochs_run = 0;
    for epoch in 0..=config.epochs {
        let mut tape = Tape::new();
        let train_step = epoch < config.epochs;
        let vars = if train_step { model.leaves(&mut tape) } else { model.constants(&mut tape) };
        let xv = tape.constant(x.clone());
        let (_, fused) = model.forward(&mut tape, &vars, xv, adj.clone())?;
        let (val_mrr, _) = evaluate_links(&model, tape.value(fused), &split.valid, &split.valid_negatives)?;
        best.offer(val_mrr, epoch, &model.params);
        if !train_step || best.since >= config.patience {
            break;
        }
        let mut pairs = split.train.clone();
        for _ in 0..split.train.len() {
            loop {
                let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
                if a != b && !train_set.contains(&(a.min(b), a.max(b))) {
                    pairs.push((a, b));
                    break;
                }
            }
        }
        let mut targets = vec![1f32; split.train.len()];
        targets.resize(pairs.len(), 0.0);
        let logits = model.link_logits(&mut tape, &vars, fused, &pairs)?;
        let loss = tape.bce_with_logits(logits, &targets)?;
        let loss_value = tape.value(loss).data()[0] as f64;
        tape.backward(loss)?;
        copy_grads(&mut model, &tape, &vars)?;
        adam.step(&mut model.params)?;
        epochs_run = epoch + 1;
        log.push(TrainLogRow {
            epoch: epoch + 1,
            train_loss: loss_value,
            valid_metric: val_mrr,
        });
    }

    model.params = best.params;
    let splits = evaluate_link(&model, split, text_emb)?;
    Ok(FinetuneOutput {
        model,
        report: EvalReport {
            task: Task::Link,
            config_hash: config_hash.to_string(),
            epochs_run,
            best_epoch: best.epoch,
            splits,
        },
        log,
    })
}

/// Train, valid and test accuracy of `model` on the full graph.
pub fn evaluate_node(model: &Model, tag: &Tag, text_emb: &EmbeddingTable) -> Result<BTreeMap<String, SplitMetrics>> {
    check_inputs(tag, text_emb)?;
    let adj = Arc::new(normalized_adjacency(tag.num_nodes(), &tag.edges()));
    let mut tape = Tape::new();
    let vars = model.constants(&mut tape);
    let xv = tape.constant(features(text_emb)?);
    let l = model.node_logits(&mut tape, &vars, xv, adj)?;
    let logits = tape.value(l);
    let mut splits = BTreeMap::new();
    for (name, s) in [("train", Split::Train), ("valid", Split::Valid), ("test", Split::Test)] {
        splits.insert(
            name.to_string(),
            SplitMetrics {
                accuracy: accuracy(logits, tag, &tag.nodes_in(s)),
                ..SplitMetrics::default()
            },
        );
    }
    Ok(splits)
}

/// Positive and per-positive negative logits for the valid and test edges,
/// with message passing over training edges.
#[allow(clippy::type_complexity)]
pub fn link_scores(model: &Model, split: &EdgeSplit, text_emb: &EmbeddingTable) -> Result<BTreeMap<String, (Vec<f64>, Vec<Vec<f64>>)>> {
    let adj = Arc::new(normalized_adjacency(text_emb.count(), &split.train));
    let mut tape = Tape::new();
    let vars = model.constants(&mut tape);
    let xv = tape.constant(features(text_emb)?);
    let (_, f) = model.forward(&mut tape, &vars, xv, adj)?;
    let fused = tape.value(f);
    let mut out = BTreeMap::new();
    for (name, pos, negs) in [
        ("valid", &split.valid, &split.valid_negatives),
        ("test", &split.test, &split.test_negatives),
    ] {
        let p = pair_scores(model, fused, pos);
        let n = negs.iter().map(|l| pair_scores(model, fused, l)).collect();
        out.insert(name.to_string(), (p, n));
    }
    Ok(out)
}

/// Valid and test MRR@10 and AUC.
pub fn evaluate_link(model: &Model, split: &EdgeSplit, text_emb: &EmbeddingTable) -> Result<BTreeMap<String, SplitMetrics>> {
    let mut splits = BTreeMap::new();
    for (name, (pos, negs)) in link_scores(model, split, text_emb)? {
        let (mrr, auc) = link_metrics(&pos, &negs)?;
        splits.insert(
            name,
            SplitMetrics {
                mrr_at_10: Some(mrr),
                auc: Some(auc),
                ..SplitMetrics::default()
            },
        );
    }
    Ok(splits)
}

/// Nearest prototype and its Euclidean distance for every node's encoder
/// output.
pub fn prototype_distances(model: &Model, text_emb: &EmbeddingTable, edges: &[(usize, usize)]) -> Result<Vec<(usize, f64)>> {
    let x = features(text_emb)?;
    let adj = Arc::new(normalized_adjacency(text_emb.count(), edges));
    let h = model.encoder().embed(&x, adj).map_err(DownstreamError::from)?;
    (0..h.rows())
        .map(|v| {
            let j = crate::aligner::vq_map(h.row(v), &model.codebook)?;
            let d: f64 = h
                .row(v)
                .iter()
                .zip(model.codebook.row(j))
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum();
            Ok((j, d.sqrt()))
        })
        .collect()
}
