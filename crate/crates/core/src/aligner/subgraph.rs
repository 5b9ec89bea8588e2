use std::collections::VecDeque;

use super::{AlignError, Result};
use crate::annograph::AnnotationGraph;
use crate::graph::{Csr, NodeId, Tag};
use crate::selector::Target;
use crate::tensor::{Real, SparseMatrix};

pub const DEFAULT_NODE_CAP: usize = 256;

/// Multi-source BFS out to `hops`, in visiting order (sources first, then by
/// distance, neighbors ascending). At most `cap` nodes are kept, nearest
/// first.
pub fn k_hop(adj: &Csr, sources: &[NodeId], hops: usize, cap: usize) -> Vec<NodeId> {
    let mut seen = vec![false; adj.num_nodes()];
    let mut order = Vec::new();
    let mut queue = VecDeque::new();
    for &s in sources {
        if !seen[s] && order.len() < cap {
            seen[s] = true;
            order.push(s);
            queue.push_back((s, 0));
        }
    }
    while let Some((v, d)) = queue.pop_front() {
        if d == hops {
            continue;
        }
        for &w in adj.neighbors(v) {
            if order.len() == cap {
                return order;
            }
            if !seen[w] {
                seen[w] = true;
                order.push(w);
                queue.push_back((w, d + 1));
            }
        }
    }
    order
}

/// Node-induced subgraph with local ids following `nodes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Subgraph {
    pub nodes: Vec<NodeId>,
    /// Local `(u, v)` with `u < v`.
    pub edges: Vec<(usize, usize)>,
}

impl Subgraph {
    pub fn induced(adj: &Csr, nodes: Vec<NodeId>) -> Self {
        let local: std::collections::HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let mut edges = Vec::new();
        for (i, &v) in nodes.iter().enumerate() {
            for w in adj.neighbors(v) {
                if let Some(&j) = local.get(w) {
                    if i < j {
                        edges.push((i, j));
                    }
                }
            }
        }
        edges.sort_unstable();
        Self { nodes, edges }
    }

    pub fn normalized_adjacency<T: Real>(&self) -> SparseMatrix<T> {
        normalized_adjacency(self.nodes.len(), &self.edges)
    }
}

/// `D^{-1/2}(A + I)D^{-1/2}` for an undirected edge list without self-loops.
pub fn normalized_adjacency<T: Real>(n: usize, edges: &[(usize, usize)]) -> SparseMatrix<T> {
    let mut deg = vec![1f64; n];
    for &(u, v) in edges {
        deg[u] += 1.0;
        deg[v] += 1.0;
    }
    let mut entries = Vec::with_capacity(n + 2 * edges.len());
    for (i, d) in deg.iter().enumerate() {
        entries.push((i, i, T::from_f64(1.0 / d)));
    }
    for &(u, v) in edges {
        let w = T::from_f64(1.0 / (deg[u] * deg[v]).sqrt());
        entries.push((u, v, w));
        entries.push((v, u, w));
    }
    SparseMatrix::from_triplets(n, n, entries).expect("indices are in range")
}

/// Matched text and annotation subgraphs around one annotated target.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphPair {
    pub target: Target,
    /// Annotation-graph node of the target.
    pub anno_node: usize,
    pub text: Subgraph,
    pub anno: Subgraph,
}

/// Text side: `hops` around the target's TAG nodes (both endpoints for an
/// edge). Annotation side: `hops` around the target's annotation node.
pub fn sample_subgraph_pair(tag: &Tag, anno: &AnnotationGraph, target: Target, hops: usize, cap: usize) -> Result<SubgraphPair> {
    let anno_node = anno.node_of(target).ok_or(AlignError::NotAnnotated(target))?;
    Ok(pair_for(tag, anno, anno_node, hops, cap))
}

pub(crate) fn pair_for(tag: &Tag, anno: &AnnotationGraph, anno_node: usize, hops: usize, cap: usize) -> SubgraphPair {
    let target = anno.target(anno_node);
    let text_nodes = k_hop(tag.adjacency(), &target.endpoints(), hops, cap.max(target.endpoints().len()));
    let anno_nodes = k_hop(anno.graph.adjacency(), &[anno_node], hops, cap);
    SubgraphPair {
        target,
        anno_node,
        text: Subgraph::induced(tag.adjacency(), text_nodes),
        anno: Subgraph::induced(anno.graph.adjacency(), anno_nodes),
    }
}
