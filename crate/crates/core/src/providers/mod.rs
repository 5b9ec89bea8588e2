//! Embedding and annotation backends: a hashed bag-of-tokens embedder, a
//! precomputed-table embedder, HTTP JSON backends, a deterministic mock
//! annotator and the cached, retrying `annotate` driver.

pub mod annotate;
pub mod embed;
pub mod http;
pub mod mock;
pub mod prompt;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{GraphError, NodeId};
use crate::selector::{Target, TargetKind};

pub use annotate::{annotate, AnnotateOptions, AnnotateOutcome, AnnotationCache, Clock, CostLedger, Failure, Pricing};
pub use embed::{Embedder, FileEmbedder, HashEmbedder, HttpEmbedder};
pub use http::ChatAnnotator;
pub use mock::MockAnnotator;
pub use prompt::{target_fields, title_and_abstract, PromptTemplate};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("remote provider failed{}: {message}", status.map(|s| format!(" with HTTP {s}")).unwrap_or_default())]
    Remote { status: Option<u16>, message: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("missing placeholder value: {0}")]
    MissingField(String),
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("embedding dimension {got} does not match declared {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ProviderError> = std::result::Result<T, E>;

impl ProviderError {
    pub(crate) fn transport(e: ureq::Error) -> Self {
        ProviderError::Remote {
            status: None,
            message: e.to_string(),
        }
    }

    /// Transport failures, timeouts, throttling and server errors.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Remote { status: None, .. } => true,
            ProviderError::Remote { status: Some(s), .. } => *s == 408 || *s == 429 || *s >= 500,
            _ => false,
        }
    }
}

/// Hex SHA-256 of a string.
pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// Delay before retry `r` is `base_delay * 2^r`.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

pub fn with_retries<T>(policy: &RetryPolicy, mut call: impl FnMut() -> Result<T>) -> Result<T> {
    let mut attempt = 0;
    loop {
        match call() {
            Err(e) if e.is_retryable() && attempt < policy.max_retries => {
                log::debug!("retry {} after: {e}", attempt + 1);
                std::thread::sleep(policy.base_delay * 2u32.pow(attempt));
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// One annotation of a selected node or edge.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub kind: TargetKind,
    pub ids: Vec<NodeId>,
    pub template_id: String,
    pub prompt_hash: String,
    pub annotation_text: String,
    pub provider_id: String,
    pub created_at: String,
}

impl AnnotationRecord {
    pub fn target(&self) -> Result<Target> {
        match (self.kind, self.ids.as_slice()) {
            (TargetKind::Node, &[v]) => Ok(Target::Node(v)),
            (TargetKind::Edge, &[u, v]) => Ok(Target::Edge(u, v)),
            _ => Err(ProviderError::Malformed(format!(
                "record ids {:?} do not match kind {:?}",
                self.ids, self.kind
            ))),
        }
    }
}

/// Writes records as JSON lines, optionally after a header comment.
pub fn write_records(path: &std::path::Path, records: &[AnnotationRecord], header: Option<&str>) -> Result<()> {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(crate::graph::HEADER_PREFIX);
        out.push_str(h);
        out.push('\n');
    }
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_records(path: &std::path::Path) -> Result<Vec<AnnotationRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for l in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let r: AnnotationRecord = serde_json::from_str(l)?;
        if r.annotation_text.trim().is_empty() {
            return Err(ProviderError::Malformed(format!("empty annotation for {:?}", r.ids)));
        }
        r.target()?;
        out.push(r);
    }
    Ok(out)
}

/// What an annotator sees for one target.
#[derive(Clone, Debug)]
pub struct AnnotationRequest<'a> {
    pub target: Target,
    pub prompt: &'a str,
    /// Texts of the target's nodes, in id order.
    pub texts: Vec<&'a str>,
    /// Known labels of the target's nodes. Only the mock reads these.
    pub labels: Vec<Option<usize>>,
}

/// Text-in, text-out annotation backend.
pub trait Annotator: Sync {
    fn provider_id(&self) -> String;
    fn complete(&self, request: &AnnotationRequest<'_>) -> Result<String>;
}
