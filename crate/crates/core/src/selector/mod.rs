//! Representative node and edge selection by information density: distance
//! to the k-means center mapped into `(0, 1]`, then top-budget by score.

mod kmeans;

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EmbeddingTable, NodeId, HEADER_PREFIX};
pub use kmeans::{kmeans, Clustering};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("cannot form {k} clusters from {points} points")]
    TooManyClusters { k: usize, points: usize },
    #[error("node scores cover {have} nodes but edge endpoint {node} needs a score")]
    MissingScore { node: usize, have: usize },
    #[error("selection file {path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SelectError> = std::result::Result<T, E>;

/// `1 / (1 + ‖emb − center‖)`.
pub fn density_score(emb: &[f32], center: &[f64]) -> f64 {
    debug_assert_eq!(emb.len(), center.len());
    1.0 / (1.0 + kmeans::sq_dist(emb, center).sqrt())
}

pub fn node_scores(emb: &EmbeddingTable, clustering: &Clustering) -> Vec<f64> {
    (0..emb.count())
        .map(|i| density_score(emb.row(i), clustering.center_of(i)))
        .collect()
}

/// `⌈fraction · n⌉`, at least one.
pub fn node_budget(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil() as usize).max(1)
}

/// `⌈√n_edges⌉`, at least one.
pub fn edge_budget(n_edges: usize) -> usize {
    ((n_edges as f64).sqrt() - 1e-9).ceil().max(1.0) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Node,
    Edge,
}

/// A selected node or (undirected, `u < v`) edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    Node(NodeId),
    Edge(NodeId, NodeId),
}

impl Target {
    pub fn kind(&self) -> TargetKind {
        match self {
            Target::Node(_) => TargetKind::Node,
            Target::Edge(..) => TargetKind::Edge,
        }
    }

    pub fn ids(&self) -> Vec<NodeId> {
        match *self {
            Target::Node(v) => vec![v],
            Target::Edge(u, v) => vec![u, v],
        }
    }

    /// TAG nodes this target covers.
    pub fn endpoints(&self) -> Vec<NodeId> {
        self.ids()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selected {
    pub target: Target,
    pub score: f64,
}

/// Chosen items in non-increasing score order.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub items: Vec<Selected>,
    pub budget: usize,
}

#[derive(Serialize, Deserialize)]
struct SelectionLine {
    kind: TargetKind,
    ids: Vec<NodeId>,
    score: f64,
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn targets(&self) -> Vec<Target> {
        self.items.iter().map(|s| s.target).collect()
    }

    pub fn to_jsonl(&self, header: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(h) = header {
            let _ = writeln!(out, "{HEADER_PREFIX}{h}");
        }
        for s in &self.items {
            let line = SelectionLine {
                kind: s.target.kind(),
                ids: s.target.ids(),
                score: s.score,
            };
            let _ = writeln!(out, "{}", serde_json::to_string(&line).expect("plain struct serializes"));
        }
        out
    }

    pub fn save(&self, path: &Path, header: Option<&str>) -> Result<()> {
        std::fs::write(path, self.to_jsonl(header))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut items = Vec::new();
        for (i, l) in text.lines().enumerate() {
            let l = l.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let err = |msg: String| SelectError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg,
            };
            let line: SelectionLine = serde_json::from_str(l).map_err(|e| err(e.to_string()))?;
            let target = match (line.kind, line.ids.as_slice()) {
                (TargetKind::Node, &[v]) => Target::Node(v),
                (TargetKind::Edge, &[u, v]) => Target::Edge(u, v),
                _ => return Err(err("ids do not match kind".into())),
            };
            items.push(Selected {
                target,
                score: line.score,
            });
        }
        let budget = items.len();
        Ok(Self { items, budget })
    }
}

fn rank(a: &Selected, b: &Selected) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.target.cmp(&b.target))
}

fn top(mut items: Vec<Selected>, budget: usize, what: &str) -> SelectionResult {
    if budget > items.len() {
        log::warn!(
            "{what} budget {budget} exceeds population {}; selecting all",
            items.len()
        );
    }
    items.sort_by(rank);
    items.truncate(budget);
    SelectionResult { items, budget }
}

/// Top-`budget` nodes by score; ties go to the lower node id.
pub fn top_nodes(scores: &[f64], budget: usize) -> SelectionResult {
    let items = scores
        .iter()
        .enumerate()
        .map(|(v, &score)| Selected {
            target: Target::Node(v),
            score,
        })
        .collect();
    top(items, budget.max(1), "node")
}

pub fn select_nodes(emb: &EmbeddingTable, clustering: &Clustering, budget: usize) -> SelectionResult {
    top_nodes(&node_scores(emb, clustering), budget)
}

/// Top-`budget` edges scored by the sum of endpoint scores; ties go to the
/// lexicographically smallest `(u, v)`.
pub fn select_edges(edges: &[(NodeId, NodeId)], node_scores: &[f64], budget: usize) -> Result<SelectionResult> {
    let mut items = Vec::with_capacity(edges.len());
    for &(a, b) in edges {
        let (u, v) = (a.min(b), a.max(b));
        let score = |x: usize| {
            node_scores.get(x).copied().ok_or(SelectError::MissingScore {
                node: x,
                have: node_scores.len(),
            })
        };
        items.push(Selected {
            target: Target::Edge(u, v),
            score: score(u)? + score(v)?,
        });
    }
    items.sort_by_key(|s| s.target);
    items.dedup_by_key(|s| s.target);
    Ok(top(items, budget.max(1), "edge"))
}
