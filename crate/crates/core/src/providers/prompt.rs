use std::collections::BTreeMap;

use super::{ProviderError, Result};
use crate::graph::Tag;
use crate::selector::Target;

/// A prompt body with `{name}` placeholders. Rendering substitutes values
/// byte-for-byte and touches nothing else.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub body: String,
}

const BUILTIN: &[(&str, &str)] = &[
    ("generic", include_str!("../../templates/generic.txt")),
    ("arxiv", include_str!("../../templates/arxiv.txt")),
    ("arxiv23", include_str!("../../templates/arxiv23.txt")),
    ("cora", include_str!("../../templates/cora.txt")),
    ("pubmed", include_str!("../../templates/pubmed.txt")),
    ("products", include_str!("../../templates/products.txt")),
    ("link", include_str!("../../templates/link.txt")),
];

/// Byte range and name of each `{name}` placeholder, in order.
fn placeholders(body: &str) -> Vec<(usize, usize, &str)> {
    let mut out = Vec::new();
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let rest = &body[i + 1..];
            let len = rest
                .bytes()
                .take_while(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || *b == b'_')
                .count();
            if len > 0 && rest.as_bytes().get(len) == Some(&b'}') {
                out.push((i, i + len + 2, &rest[..len]));
                i += len + 2;
                continue;
            }
        }
        i += 1;
    }
    out
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            body: body.into(),
        }
    }

    pub fn builtin_ids() -> Vec<&'static str> {
        BUILTIN.iter().map(|(id, _)| *id).collect()
    }

    pub fn builtin(id: &str) -> Result<Self> {
        BUILTIN
            .iter()
            .find(|(k, _)| *k == id)
            .map(|(k, body)| Self::new(*k, *body))
            .ok_or_else(|| ProviderError::Config(format!("unknown prompt template {id:?}")))
    }

    pub fn placeholder_names(&self) -> Vec<String> {
        let mut names: Vec<String> = placeholders(&self.body).into_iter().map(|(_, _, n)| n.to_string()).collect();
        names.dedup();
        names
    }

    pub fn render(&self, fields: &BTreeMap<String, String>) -> Result<String> {
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut cursor = 0;
        for (start, end, name) in placeholders(&self.body) {
            let value = fields
                .get(name)
                .ok_or_else(|| ProviderError::MissingField(format!("{} needs {{{name}}}", self.id)))?;
            out.push_str(&self.body[cursor..start]);
            out.push_str(value);
            cursor = end;
        }
        out.push_str(&self.body[cursor..]);
        Ok(out)
    }
}

/// Splits a node text into `(title, abstract)`: the first line is the title
/// when the text has several lines, otherwise the title is empty.
pub fn title_and_abstract(text: &str) -> (&str, &str) {
    match text.split_once('\n') {
        Some((t, a)) => (t.trim(), a.trim()),
        None => ("", text),
    }
}

/// Placeholder values for a selected node or edge.
pub fn target_fields(tag: &Tag, target: Target, categories: &str) -> BTreeMap<String, String> {
    let mut f = BTreeMap::new();
    f.insert("categories".to_string(), categories.to_string());
    match target {
        Target::Node(v) => {
            let (title, abs) = title_and_abstract(tag.text(v));
            f.insert("text".into(), tag.text(v).to_string());
            f.insert("title".into(), title.to_string());
            f.insert("abstract".into(), abs.to_string());
        }
        Target::Edge(u, v) => {
            for (k, node) in [(1, u), (2, v)] {
                let (title, abs) = title_and_abstract(tag.text(node));
                f.insert(format!("title{k}"), title.to_string());
                f.insert(format!("abstract{k}"), abs.to_string());
                f.insert(format!("text{k}"), tag.text(node).to_string());
            }
        }
    }
    f
}
