//! Annotation graph: one node per annotation, each linked to its `k'` most
//! cosine-similar peers, stored undirected.

use std::path::Path;

use thiserror::Error;

use crate::graph::{load_tag, save_tag, EmbeddingTable, GraphError, NodeId, Tag};
use crate::providers::{read_records, AnnotationRecord, ProviderError};
use crate::selector::Target;

#[derive(Debug, Error)]
pub enum AnnoGraphError {
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("k'={k} needs more than {k} annotations, found {n}")]
    TooFewNodes { k: usize, n: usize },
    #[error("vectors of length {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("{records} records but {rows} embedding rows")]
    RowMismatch { records: usize, rows: usize },
    #[error("{0}")]
    Inconsistent(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

pub type Result<T, E = AnnoGraphError> = std::result::Result<T, E>;

pub fn cosine_sim(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(AnnoGraphError::LengthMismatch(u.len(), v.len()));
    }
    let (mut dot, mut nu, mut nv) = (0f64, 0f64, 0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(AnnoGraphError::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Indices of the `k` rows most similar to row `i`, excluding `i`. Ties go to
/// the lower index.
pub fn top_k_neighbors(emb: &EmbeddingTable, i: usize, k: usize) -> Result<Vec<usize>> {
    let mut sims = Vec::with_capacity(emb.count().saturating_sub(1));
    for j in (0..emb.count()).filter(|&j| j != i) {
        sims.push((cosine_sim(emb.row(i), emb.row(j))?, j));
    }
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(sims.into_iter().take(k).map(|(_, j)| j).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationGraph {
    /// Annotation texts over the KNN edges; node `i` is `records[i]`.
    pub graph: Tag,
    pub records: Vec<AnnotationRecord>,
    pub embeddings: EmbeddingTable,
    pub k: usize,
}

pub fn build_annotation_graph(records: Vec<AnnotationRecord>, embeddings: EmbeddingTable, k: usize) -> Result<AnnotationGraph> {
    let n = records.len();
    if embeddings.count() != n {
        return Err(AnnoGraphError::RowMismatch {
            records: n,
            rows: embeddings.count(),
        });
    }
    if k >= n {
        return Err(AnnoGraphError::TooFewNodes { k, n });
    }
    let mut edges = Vec::with_capacity(n * k);
    for i in 0..n {
        for j in top_k_neighbors(&embeddings, i, k)? {
            edges.push((i.min(j), i.max(j)));
        }
    }
    let texts = records.iter().map(|r| r.annotation_text.clone()).collect();
    let graph = Tag::new(texts, &edges, vec![None; n], 0, vec![None; n])?;
    Ok(AnnotationGraph {
        graph,
        records,
        embeddings,
        k,
    })
}

impl AnnotationGraph {
    pub fn num_nodes(&self) -> usize {
        self.records.len()
    }

    pub fn neighbors(&self, i: usize) -> &[NodeId] {
        self.graph.neighbors(i)
    }

    pub fn target(&self, i: usize) -> Target {
        self.records[i].target().expect("records validated on construction")
    }

    /// Annotation node for a target, if it was annotated.
    pub fn node_of(&self, target: Target) -> Option<usize> {
        (0..self.num_nodes()).find(|&i| self.target(i) == target)
    }

    /// Writes `<stem>.nodes.jsonl` and `<stem>.edges.txt` in graph-store
    /// format, plus the embeddings as `<stem>.emb`.
    pub fn save(&self, dir: &Path, stem: &str, header: Option<&str>) -> Result<()> {
        save_tag(
            &self.graph,
            &dir.join(format!("{stem}.nodes.jsonl")),
            &dir.join(format!("{stem}.edges.txt")),
            header,
        )?;
        self.embeddings.save(&dir.join(format!("{stem}.emb")))?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str, records_file: &Path, k: usize) -> Result<Self> {
        let graph = load_tag(
            &dir.join(format!("{stem}.nodes.jsonl")),
            &dir.join(format!("{stem}.edges.txt")),
            Some(0),
        )?;
        let records = read_records(records_file)?;
        let embeddings = EmbeddingTable::load(&dir.join(format!("{stem}.emb")))?;
        if graph.num_nodes() != records.len() || embeddings.count() != records.len() {
            return Err(AnnoGraphError::Inconsistent(format!(
                "annotation graph has {} nodes, {} records and {} embedding rows",
                graph.num_nodes(),
                records.len(),
                embeddings.count()
            )));
        }
        for (i, r) in records.iter().enumerate() {
            if graph.text(i) != r.annotation_text {
                return Err(AnnoGraphError::Inconsistent(format!("node {i} text differs from its record")));
            }
        }
        Ok(Self {
            graph,
            records,
            embeddings,
            k,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selector::TargetKind;
    use proptest::prelude::*;

    pub(crate) fn records(n: usize) -> Vec<AnnotationRecord> {
        (0..n)
            .map(|i| AnnotationRecord {
                kind: TargetKind::Node,
                ids: vec![i],
                template_id: "generic".into(),
                prompt_hash: format!("{i:064x}"),
                annotation_text: format!("annotation {i}"),
                provider_id: "test".into(),
                created_at: "1970-01-01T00:00:00Z".into(),
            })
            .collect()
    }

    fn table(rows: &[Vec<f32>]) -> EmbeddingTable {
        EmbeddingTable::from_rows(rows, "test").unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(AnnoGraphError::ZeroVector)));
    }

    #[test]
    fn nearest_by_angle_k1() {
        // angles 0°, 10°, 80°
        let rows: Vec<Vec<f32>> = [0f32, 10.0, 80.0]
            .iter()
            .map(|d| vec![d.to_radians().cos(), d.to_radians().sin()])
            .collect();
        let g = build_annotation_graph(records(3), table(&rows), 1).unwrap();
        assert_eq!(g.graph.edges(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn saturation_is_complete() {
        let rows: Vec<Vec<f32>> = (0..5).map(|i| vec![1.0, i as f32, (i * i) as f32 + 1.0]).collect();
        let g = build_annotation_graph(records(5), table(&rows), 4).unwrap();
        assert_eq!(g.graph.num_edges(), 10);
        assert!(matches!(
            build_annotation_graph(records(5), table(&rows), 5),
            Err(AnnoGraphError::TooFewNodes { .. })
        ));
    }

    #[test]
    fn identical_rows_pick_each_other() {
        let rows = vec![vec![1.0, 0.2], vec![0.0, 1.0], vec![1.0, 0.2], vec![-1.0, 0.3]];
        let g = build_annotation_graph(records(4), table(&rows), 1).unwrap();
        assert!(g.graph.adjacency().has_edge(0, 2));
        assert_eq!(top_k_neighbors(&g.embeddings, 0, 1).unwrap(), vec![2]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<Vec<f32>> = (0..4).map(|i| vec![1.0, i as f32]).collect();
        let g = build_annotation_graph(records(4), table(&rows), 2).unwrap();
        g.save(dir.path(), "anno", Some("h")).unwrap();
        let rec = dir.path().join("r.jsonl");
        crate::providers::write_records(&rec, &g.records, None).unwrap();
        let back = AnnotationGraph::load(dir.path(), "anno", &rec, 2).unwrap();
        assert_eq!(back.graph, g.graph);
        assert_eq!(back.records, g.records);
    }

    fn brute_force_top(rows: &[Vec<f32>], i: usize, k: usize) -> Vec<usize> {
        let cos = |a: &[f32], b: &[f32]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
            let n = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            d / (n(a) * n(b))
        };
        let mut others: Vec<usize> = (0..rows.len()).filter(|&j| j != i).collect();
        // stable sort keeps lower indices first among equal similarities
        others.sort_by(|&a, &b| cos(&rows[i], &rows[b]).total_cmp(&cos(&rows[i], &rows[a])));
        others.truncate(k);
        others
    }

    fn rows_strategy() -> impl Strategy<Value = Vec<Vec<f32>>> {
        (3usize..12).prop_flat_map(|n| {
            prop::collection::vec(
                prop::collection::vec(-4i8..=4, 3).prop_filter("non-zero", |v| v.iter().any(|x| *x != 0)),
                n,
            )
            .prop_map(|rows| rows.into_iter().map(|r| r.into_iter().map(f32::from).collect()).collect())
        })
    }

    proptest! {
        #[test]
        fn knn_links_present(rows in rows_strategy(), k in 1usize..3) {
            let g = build_annotation_graph(records(rows.len()), table(&rows), k).unwrap();
            for i in 0..rows.len() {
                for j in brute_force_top(&rows, i, k) {
                    prop_assert!(g.graph.adjacency().has_edge(i, j));
                }
            }
            prop_assert!(g.graph.edges().iter().all(|(u, v)| u != v));
        }

        #[test]
        fn invariant_to_row_rescaling(rows in rows_strategy(), exps in prop::collection::vec(-3i32..5, 12)) {
            // power-of-two scales are exact, so ties stay ties
            let scale: Vec<f32> = exps.iter().map(|e| 2f32.powi(*e)).collect();
            let g = build_annotation_graph(records(rows.len()), table(&rows), 2).unwrap();
            let scaled: Vec<Vec<f32>> = rows.iter().zip(&scale).map(|(r, s)| r.iter().map(|x| x * s).collect()).collect();
            let h = build_annotation_graph(records(rows.len()), table(&scaled), 2).unwrap();
            prop_assert_eq!(g.graph.edges(), h.graph.edges());
        }
    }
}
