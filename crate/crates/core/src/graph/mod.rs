//! Text-attributed graphs: CSR adjacency, labels, splits, file formats,
//! a stochastic-block-model generator and link-prediction edge splits.

mod edge_split;
mod embedding;
mod io;
mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use edge_split::{make_edge_split, EdgeSplit, SplitFractions};
pub use embedding::EmbeddingTable;
pub use io::{load_tag, read_edge_list, save_tag, write_edge_list, HEADER_PREFIX};
pub use synth::{class_keyword, synth_tag, SynthSpec, VocabSpec};

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("edge ({0}, {1}) has an endpoint outside 0..{2}")]
    DanglingEndpoint(usize, usize, usize),
    #[error("node {node}: label {label} >= number of classes {classes}")]
    LabelOutOfRange { node: usize, label: usize, classes: usize },
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("invalid probabilities: p_in={p_in}, p_out={p_out}")]
    Probabilities { p_in: f64, p_out: f64 },
    #[error("insufficient edges: {0}")]
    InsufficientEdges(String),
    #[error("embedding table: {0}")]
    Embedding(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Undirected adjacency in compressed sparse row form. Neighbor lists are
/// sorted ascending; no self-loops or duplicates are stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Csr {
    indptr: Vec<usize>,
    indices: Vec<usize>,
}

impl Csr {
    /// Symmetrizes and deduplicates `edges`; self-loops are dropped.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(GraphError::DanglingEndpoint(u, v, num_nodes));
            }
            if u == v {
                continue;
            }
            lists[u].push(v);
            lists[v].push(u);
        }
        let mut indptr = Vec::with_capacity(num_nodes + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            indices.extend(l);
            indptr.push(indices.len());
        }
        Ok(Self { indptr, indices })
    }

    pub fn num_nodes(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn neighbors(&self, v: NodeId) -> &[NodeId] {
        &self.indices[self.indptr[v]..self.indptr[v + 1]]
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.indptr[v + 1] - self.indptr[v]
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.indices.len() / 2
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Undirected edges as `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        (0..self.num_nodes())
            .flat_map(|u| self.neighbors(u).iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
            .collect()
    }
}

/// A text-attributed graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Tag {
    adjacency: Csr,
    node_texts: Vec<String>,
    labels: Vec<Option<usize>>,
    num_classes: usize,
    splits: Vec<Option<Split>>,
}

impl Tag {
    pub fn new(
        node_texts: Vec<String>,
        edges: &[(NodeId, NodeId)],
        labels: Vec<Option<usize>>,
        num_classes: usize,
        splits: Vec<Option<Split>>,
    ) -> Result<Self> {
        let n = node_texts.len();
        if labels.len() != n || splits.len() != n {
            return Err(GraphError::Invalid(format!(
                "{n} texts but {} labels and {} split tags",
                labels.len(),
                splits.len()
            )));
        }
        for (node, l) in labels.iter().enumerate() {
            if let Some(label) = *l {
                if label >= num_classes {
                    return Err(GraphError::LabelOutOfRange {
                        node,
                        label,
                        classes: num_classes,
                    });
                }
            }
            if l.is_some() != splits[node].is_some() {
                return Err(GraphError::Invalid(format!(
                    "node {node}: labeled nodes need a split tag and vice versa"
                )));
            }
        }
        Ok(Self {
            adjacency: Csr::from_edges(n, edges)?,
            node_texts,
            labels,
            num_classes,
            splits,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_texts.len()
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.num_edges()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn adjacency(&self) -> &Csr {
        &self.adjacency
    }

    pub fn neighbors(&self, v: NodeId) -> &[NodeId] {
        self.adjacency.neighbors(v)
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.adjacency.degree(v)
    }

    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.adjacency.edges()
    }

    pub fn text(&self, v: NodeId) -> &str {
        &self.node_texts[v]
    }

    pub fn texts(&self) -> &[String] {
        &self.node_texts
    }

    pub fn label(&self, v: NodeId) -> Option<usize> {
        self.labels[v]
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn split(&self, v: NodeId) -> Option<Split> {
        self.splits[v]
    }

    pub fn has_labels(&self) -> bool {
        self.labels.iter().any(Option::is_some)
    }

    /// Node ids in `split`, ascending.
    pub fn nodes_in(&self, split: Split) -> Vec<NodeId> {
        (0..self.num_nodes()).filter(|&v| self.splits[v] == Some(split)).collect()
    }

    /// Same nodes, texts and labels over a different edge set.
    pub fn with_edges(&self, edges: &[(NodeId, NodeId)]) -> Result<Self> {
        Ok(Self {
            adjacency: Csr::from_edges(self.num_nodes(), edges)?,
            ..self.clone()
        })
    }
}
