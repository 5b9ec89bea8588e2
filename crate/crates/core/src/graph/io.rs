//! Node JSON-lines and whitespace edge-list formats.
//!
//! Lines starting with `#` are comments in both formats. Artifacts written by
//! the pipeline carry a `# gaga config_hash=<hex>` header line.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GraphError, NodeId, Result, Split, Tag};

pub const HEADER_PREFIX: &str = "# gaga config_hash=";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeLine {
    id: usize,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn read_edge_list(path: &Path) -> Result<Vec<(NodeId, NodeId)>> {
    let text = fs::read_to_string(path)?;
    let mut edges = Vec::new();
    for (line, l) in content_lines(&text) {
        let parse_err = |msg: String| GraphError::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        let fields: Vec<&str> = l.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(format!("expected two node ids, found {}", fields.len())));
        }
        let id = |s: &str| s.parse::<usize>().map_err(|e| parse_err(format!("bad node id {s:?}: {e}")));
        edges.push((id(fields[0])?, id(fields[1])?));
    }
    Ok(edges)
}

pub fn write_edge_list(path: &Path, edges: &[(NodeId, NodeId)], header: Option<&str>) -> Result<()> {
    let mut out = Vec::new();
    if let Some(h) = header {
        writeln!(out, "{HEADER_PREFIX}{h}")?;
    }
    for (u, v) in edges {
        writeln!(out, "{u} {v}")?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads and validates a TAG. `num_classes` defaults to one past the
/// largest label present.
pub fn load_tag(node_file: &Path, edge_file: &Path, num_classes: Option<usize>) -> Result<Tag> {
    let text = fs::read_to_string(node_file)?;
    let mut rows: Vec<NodeLine> = Vec::new();
    for (line, l) in content_lines(&text) {
        let row: NodeLine = serde_json::from_str(l).map_err(|e| GraphError::Parse {
            path: node_file.display().to_string(),
            line,
            msg: e.to_string(),
        })?;
        rows.push(row);
    }
    rows.sort_by_key(|r| r.id);
    for (expected, r) in rows.iter().enumerate() {
        if r.id != expected {
            return Err(GraphError::Invalid(format!(
                "node ids must be exactly 0..{} without gaps or repeats (found {} at position {expected})",
                rows.len(),
                r.id
            )));
        }
    }
    let classes = num_classes.unwrap_or_else(|| rows.iter().filter_map(|r| r.label).max().map_or(0, |m| m + 1));
    let edges = read_edge_list(edge_file)?;
    let labels = rows.iter().map(|r| r.label).collect();
    let splits = rows.iter().map(|r| r.split).collect();
    let texts = rows.into_iter().map(|r| r.text).collect();
    Tag::new(texts, &edges, labels, classes, splits)
}

pub fn save_tag(tag: &Tag, node_file: &Path, edge_file: &Path, header: Option<&str>) -> Result<()> {
    let mut out = Vec::new();
    if let Some(h) = header {
        writeln!(out, "{HEADER_PREFIX}{h}")?;
    }
    for v in 0..tag.num_nodes() {
        let line = NodeLine {
            id: v,
            text: tag.text(v).to_string(),
            label: tag.label(v),
            split: tag.split(v),
        };
        let json = serde_json::to_string(&line).map_err(|e| GraphError::Invalid(e.to_string()))?;
        writeln!(out, "{json}")?;
    }
    fs::write(node_file, out)?;
    write_edge_list(edge_file, &tag.edges(), header)
}
