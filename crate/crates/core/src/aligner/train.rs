use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::codebook::Codebook;
use super::gcn::{gcn_forward, GcnConfig, GcnEncoder};
use super::loss::loss_combined;
use super::subgraph::{pair_for, DEFAULT_NODE_CAP};
use super::{AlignError, Result};
use crate::annograph::AnnotationGraph;
use crate::graph::{EmbeddingTable, Tag};
use crate::seed;
use crate::tensor::{Adam, AdamConfig, SparseMatrix, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hops: usize,
    pub node_cap: usize,
    pub alpha: f64,
    pub k_p: usize,
    pub lr: f64,
    pub gamma: f64,
    pub gcn: GcnConfig,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            hops: 2,
            node_cap: DEFAULT_NODE_CAP,
            alpha: 0.6,
            k_p: 40,
            lr: 5e-5,
            gamma: 0.99,
            gcn: GcnConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct Alignment {
    pub encoder: GcnEncoder,
    pub codebook: Codebook,
    pub log: Vec<EpochLoss>,
}

/// Features and normalized adjacencies of one subgraph pair.
pub(crate) struct PreparedPair {
    x_t: Tensor<f32>,
    adj_t: Arc<SparseMatrix<f32>>,
    x_a: Tensor<f32>,
    adj_a: Arc<SparseMatrix<f32>>,
}

fn gather(emb: &EmbeddingTable, nodes: &[usize]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(nodes.len() * emb.dim());
    for &v in nodes {
        data.extend_from_slice(emb.row(v));
    }
    Ok(Tensor::matrix(nodes.len(), emb.dim(), data)?)
}

pub(crate) fn prepare_pairs(tag: &Tag, text_emb: &EmbeddingTable, anno: &AnnotationGraph, hops: usize, cap: usize) -> Result<Vec<PreparedPair>> {
    if text_emb.count() != tag.num_nodes() {
        return Err(AlignError::Graph(crate::graph::GraphError::Embedding(format!(
            "{} text embeddings for {} nodes",
            text_emb.count(),
            tag.num_nodes()
        ))));
    }
    if anno.embeddings.dim() != text_emb.dim() {
        return Err(AlignError::Graph(crate::graph::GraphError::Embedding(format!(
            "annotation embeddings have dim {} but text embeddings {}",
            anno.embeddings.dim(),
            text_emb.dim()
        ))));
    }
    (0..anno.num_nodes())
        .map(|i| {
            let pair = pair_for(tag, anno, i, hops, cap);
            Ok(PreparedPair {
                x_t: gather(text_emb, &pair.text.nodes)?,
                adj_t: Arc::new(pair.text.normalized_adjacency()),
                x_a: gather(&anno.embeddings, &pair.anno.nodes)?,
                adj_a: Arc::new(pair.anno.normalized_adjacency()),
            })
        })
        .collect()
}

/// Row-normalized mean-pooled encodings of both sides for `batch`.
fn pooled(tape: &mut Tape<f32>, params: &[Var], pairs: &[PreparedPair], batch: &[usize]) -> Result<(Var, Var)> {
    let mut ts = Vec::with_capacity(batch.len());
    let mut as_ = Vec::with_capacity(batch.len());
    for &i in batch {
        let p = &pairs[i];
        let xt = tape.constant(p.x_t.clone());
        let ht = gcn_forward(tape, params, xt, p.adj_t.clone())?;
        ts.push(tape.mean_rows(ht)?);
        let xa = tape.constant(p.x_a.clone());
        let ha = gcn_forward(tape, params, xa, p.adj_a.clone())?;
        as_.push(tape.mean_rows(ha)?);
    }
    let t = tape.concat_rows(&ts)?;
    let a = tape.concat_rows(&as_)?;
    Ok((tape.l2_normalize_rows(t)?, tape.l2_normalize_rows(a)?))
}

/// Pooled text and annotation encodings of every pair, without gradients.
pub(crate) fn pooled_values(encoder: &GcnEncoder, pairs: &[PreparedPair]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut tape = Tape::new();
    let params: Vec<Var> = encoder.params.iter().map(|p| tape.constant(p.clone())).collect();
    let all: Vec<usize> = (0..pairs.len()).collect();
    let (t, a) = pooled(&mut tape, &params, pairs, &all)?;
    Ok((tape.value(t).clone(), tape.value(a).clone()))
}

/// Splits a shuffled order into batches, folding a trailing singleton into
/// the previous batch so every batch has at least two pairs.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(2)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

/// Trains the shared encoder on matched text/annotation subgraph pairs, one
/// pair per annotation.
pub fn align_train(tag: &Tag, text_emb: &EmbeddingTable, anno: &AnnotationGraph, config: &AlignConfig) -> Result<Alignment> {
    if anno.num_nodes() < 2 {
        return Err(AlignError::TooFewSeeds(anno.num_nodes()));
    }
    if !(0.0..=1.0).contains(&config.alpha) {
        return Err(AlignError::Alpha(config.alpha));
    }
    let pairs = prepare_pairs(tag, text_emb, anno, config.hops, config.node_cap)?;
    let mut encoder = GcnEncoder::<f32>::new(text_emb.dim(), &config.gcn, config.seed)?;
    let (_, pool) = pooled_values(&encoder, &pairs)?;
    let mut codebook = Codebook::from_pool(&pool, config.k_p, config.gamma, seed::derive(config.seed, "codebook/init"))?;

    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &encoder.params);
    let mut shuffle_rng = seed::rng(config.seed, "align/shuffle");
    let mut ema_rng = seed::rng(config.seed, "align/ema");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0f64;
        let batch_list = batches(&order, config.batch_size);
        for batch in &batch_list {
            let mut tape = Tape::new();
            let params = encoder.leaves(&mut tape);
            let (t, a) = pooled(&mut tape, &params, &pairs, batch)?;
            let a_val = tape.value(a).clone();
            let assignment = codebook.assign(&a_val)?;
            let z = codebook.quantize(&assignment);
            let za = tape.straight_through(a, &z)?;
            let loss = loss_combined(&mut tape, t, a, za, config.alpha)?;
            total += tape.value(loss).data()[0] as f64;
            tape.backward(loss)?;
            for (p, v) in encoder.params.iter_mut().zip(&params) {
                p.clear_grad();
                if let Some(g) = tape.grad(*v) {
                    p.accumulate_grad(g)?;
                }
            }
            adam.step(&mut encoder.params)?;
            codebook.update(&a_val, &assignment, &mut ema_rng);
        }
        let loss = total / batch_list.len() as f64;
        log::debug!("align epoch {epoch}: loss {loss:.6}");
        log.push(EpochLoss { epoch, loss });
    }
    for p in &mut encoder.params {
        p.clear_grad();
    }
    Ok(Alignment { encoder, codebook, log })
}

/// Mean matched (`i = j`) and mismatched (`i ≠ j`) squared distances between
/// pooled text and annotation encodings.
pub fn pair_distances(encoder: &GcnEncoder, tag: &Tag, text_emb: &EmbeddingTable, anno: &AnnotationGraph, hops: usize) -> Result<(f64, f64)> {
    let pairs = prepare_pairs(tag, text_emb, anno, hops, DEFAULT_NODE_CAP)?;
    let (t, a) = pooled_values(encoder, &pairs)?;
    let n = pairs.len();
    let (mut matched, mut mismatched) = (0f64, 0f64);
    for i in 0..n {
        for j in 0..n {
            let d: f64 = t.row(i).iter().zip(a.row(j)).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
            if i == j {
                matched += d;
            } else {
                mismatched += d;
            }
        }
    }
    let off = (n * (n - 1)).max(1) as f64;
    Ok((matched / n as f64, mismatched / off))
}
