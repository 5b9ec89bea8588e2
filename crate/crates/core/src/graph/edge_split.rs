use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GraphError, NodeId, Result, Tag};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

/// Positive edges per split plus, for each evaluation positive, its own list
/// of sampled non-edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeSplit {
    pub train: Vec<(NodeId, NodeId)>,
    pub valid: Vec<(NodeId, NodeId)>,
    pub test: Vec<(NodeId, NodeId)>,
    pub valid_negatives: Vec<Vec<(NodeId, NodeId)>>,
    pub test_negatives: Vec<Vec<(NodeId, NodeId)>>,
}

fn count_for(fraction: f64, total: usize) -> usize {
    // floor, with slack for values like 0.1 * 1000 landing a hair under 100
    (fraction * total as f64 + 1e-9).floor() as usize
}

/// Shuffles the edge set and carves off `floor(test·E)` test and
/// `floor(valid·E)` validation positives; the remainder is training.
pub fn make_edge_split(tag: &Tag, fractions: SplitFractions, negatives_per_edge: usize, seed: u64) -> Result<EdgeSplit> {
    let SplitFractions { train, valid, test } = fractions;
    if [train, valid, test].iter().any(|f| !(0.0..=1.0).contains(f)) || train + valid + test > 1.0 + 1e-9 {
        return Err(GraphError::Invalid(format!("bad split fractions {fractions:?}")));
    }
    if negatives_per_edge == 0 {
        return Err(GraphError::Invalid("need at least one negative per edge".into()));
    }
    let mut edges = tag.edges();
    let total = edges.len();
    let n_test = count_for(test, total);
    let n_valid = count_for(valid, total);
    if total == 0 || n_test + n_valid >= total {
        return Err(GraphError::InsufficientEdges(format!(
            "{total} edges cannot hold {n_valid} valid + {n_test} test positives and a training set"
        )));
    }
    if (test > 0.0 && n_test == 0) || (valid > 0.0 && n_valid == 0) {
        return Err(GraphError::InsufficientEdges(format!(
            "{total} edges leave an empty evaluation split for {fractions:?}"
        )));
    }
    let n = tag.num_nodes();
    let non_edges = n * (n - 1) / 2 - total;
    if non_edges < negatives_per_edge {
        return Err(GraphError::InsufficientEdges(format!(
            "only {non_edges} non-edges for {negatives_per_edge} negatives per positive"
        )));
    }

    edges.shuffle(&mut seed::rng(seed, "edge_split/shuffle"));
    let mut test_pos = edges[..n_test].to_vec();
    let mut valid_pos = edges[n_test..n_test + n_valid].to_vec();
    let mut train_pos = edges[n_test + n_valid..].to_vec();
    test_pos.sort_unstable();
    valid_pos.sort_unstable();
    train_pos.sort_unstable();

    let adj = tag.adjacency();
    let mut rng = seed::rng(seed, "edge_split/negatives");
    let mut sample = |count: usize| -> Vec<Vec<(NodeId, NodeId)>> {
        (0..count)
            .map(|_| {
                let mut seen = BTreeSet::new();
                let mut list = Vec::with_capacity(negatives_per_edge);
                while list.len() < negatives_per_edge {
                    let u = rng.random_range(0..n);
                    let v = rng.random_range(0..n);
                    if u == v || adj.has_edge(u, v) {
                        continue;
                    }
                    let pair = (u.min(v), u.max(v));
                    if seen.insert(pair) {
                        list.push(pair);
                    }
                }
                list
            })
            .collect()
    };
    let valid_negatives = sample(valid_pos.len());
    let test_negatives = sample(test_pos.len());
    Ok(EdgeSplit {
        train: train_pos,
        valid: valid_pos,
        test: test_pos,
        valid_negatives,
        test_negatives,
    })
}
