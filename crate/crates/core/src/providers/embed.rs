use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{content_hash, with_retries, ProviderError, Result, RetryPolicy};
use crate::graph::EmbeddingTable;

/// Text → vector backend.
pub trait Embedder {
    fn provider_id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<EmbeddingTable>;
}

fn require_texts(texts: &[String]) -> Result<()> {
    if texts.is_empty() {
        Err(ProviderError::Config("embed called with no texts".into()))
    } else {
        Ok(())
    }
}

/// Lower-cased alphanumeric tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Signed feature hashing of the token bag, L2-normalized. Deterministic and
/// offline; texts without tokens map to the zero vector.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(ProviderError::Config("hash embedding dimension must be positive".into()));
        }
        Ok(Self { dim })
    }

    pub fn vector(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f64; self.dim];
        for tok in tokenize(text) {
            let h = crate::seed::derive(0, &tok);
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v.into_iter().map(|x| x as f32).collect()
    }
}

impl Embedder for HashEmbedder {
    fn provider_id(&self) -> String {
        format!("hash-bow-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<EmbeddingTable> {
        require_texts(texts)?;
        let data = texts.iter().flat_map(|t| self.vector(t)).collect();
        Ok(EmbeddingTable::new(self.dim, data, self.provider_id())?)
    }
}

/// Precomputed table whose row `i` is the embedding of the `i`-th text.
#[derive(Clone, Debug)]
pub struct FileEmbedder {
    table: EmbeddingTable,
}

impl FileEmbedder {
    pub fn new(table: EmbeddingTable) -> Self {
        Self { table }
    }

    pub fn open(path: &std::path::Path) -> Result<Self> {
        Ok(Self::new(EmbeddingTable::load(path)?))
    }
}

impl Embedder for FileEmbedder {
    fn provider_id(&self) -> String {
        self.table.provenance().to_string()
    }

    fn dim(&self) -> usize {
        self.table.dim()
    }

    fn embed(&self, texts: &[String]) -> Result<EmbeddingTable> {
        require_texts(texts)?;
        if texts.len() != self.table.count() {
            return Err(ProviderError::Config(format!(
                "embedding file has {} rows for {} texts",
                self.table.count(),
                texts.len()
            )));
        }
        Ok(self.table.clone())
    }
}

#[derive(Serialize, Deserialize)]
struct CachedVector {
    key: String,
    vector: Vec<f32>,
}

/// Remote JSON embedding endpoint. Request: `{"model", "input": [texts]}`;
/// response: `{"data": [{"embedding": [..]}, ..]}` in input order. Vectors
/// are cached by text hash in an append-only JSONL file.
pub struct HttpEmbedder {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub dim: usize,
    pub retry: RetryPolicy,
    pub cache_file: Option<PathBuf>,
    pub batch_size: usize,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f32>,
}

impl HttpEmbedder {
    fn cache_key(&self, text: &str) -> String {
        content_hash(&format!("{}\u{0}{text}", self.provider_id()))
    }

    fn load_cache(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        let mut map = BTreeMap::new();
        let Some(path) = &self.cache_file else { return Ok(map) };
        if !path.exists() {
            return Ok(map);
        }
        for line in std::fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()) {
            let c: CachedVector = serde_json::from_str(line)?;
            map.insert(c.key, c.vector);
        }
        Ok(map)
    }

    fn request(&self, batch: &[String]) -> Result<Vec<Vec<f32>>> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let body = serde_json::json!({ "model": self.model, "input": batch });
        let mut req = agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(ProviderError::transport)?;
        let status = resp.status().as_u16();
        if status >= 400 {
            return Err(ProviderError::Remote {
                status: Some(status),
                message: resp.body_mut().read_to_string().unwrap_or_default(),
            });
        }
        let parsed: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::Malformed(format!("embedding response: {e}")))?;
        if parsed.data.len() != batch.len() {
            return Err(ProviderError::Malformed(format!(
                "{} embeddings for {} inputs",
                parsed.data.len(),
                batch.len()
            )));
        }
        parsed
            .data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != self.dim {
                    Err(ProviderError::DimMismatch {
                        expected: self.dim,
                        got: d.embedding.len(),
                    })
                } else {
                    Ok(d.embedding)
                }
            })
            .collect()
    }
}

impl Embedder for HttpEmbedder {
    fn provider_id(&self) -> String {
        format!("http:{}:{}", self.endpoint, self.model)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<EmbeddingTable> {
        require_texts(texts)?;
        let mut cache = self.load_cache()?;
        let mut missing: Vec<&String> = texts.iter().filter(|t| !cache.contains_key(&self.cache_key(t))).collect();
        missing.sort();
        missing.dedup();
        let mut fresh = Vec::new();
        for batch in missing.chunks(self.batch_size.max(1)) {
            let owned: Vec<String> = batch.iter().map(|s| s.to_string()).collect();
            let vectors = with_retries(&self.retry, || self.request(&owned))?;
            for (text, vector) in owned.into_iter().zip(vectors) {
                let key = self.cache_key(&text);
                fresh.push(CachedVector { key: key.clone(), vector: vector.clone() });
                cache.insert(key, vector);
            }
        }
        if let (Some(path), false) = (&self.cache_file, fresh.is_empty()) {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            for c in &fresh {
                writeln!(f, "{}", serde_json::to_string(c)?)?;
            }
        }
        let mut data = Vec::with_capacity(texts.len() * self.dim);
        for t in texts {
            let v = &cache[&self.cache_key(t)];
            if v.len() != self.dim {
                return Err(ProviderError::DimMismatch {
                    expected: self.dim,
                    got: v.len(),
                });
            }
            data.extend_from_slice(v);
        }
        Ok(EmbeddingTable::new(self.dim, data, self.provider_id())?)
    }
}
