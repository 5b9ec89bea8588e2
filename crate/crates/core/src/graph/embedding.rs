use std::fs;
use std::path::Path;

use super::{GraphError, Result};

const MAGIC: &[u8; 4] = b"GEMB";
const VERSION: u32 = 1;

/// Row-major table of `count` vectors of dimension `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f32>,
    provenance: String,
}

impl EmbeddingTable {
    pub fn new(dim: usize, data: Vec<f32>, provenance: impl Into<String>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(GraphError::Embedding(format!(
                "{} values do not form rows of dimension {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GraphError::Embedding("non-finite value".into()));
        }
        Ok(Self {
            dim,
            data,
            provenance: provenance.into(),
        })
    }

    pub fn from_rows(rows: &[Vec<f32>], provenance: impl Into<String>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(GraphError::Embedding("ragged rows".into()));
        }
        Self::new(dim, rows.concat(), provenance)
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, ids: &[usize]) -> Self {
        let data = ids.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self {
            dim: self.dim,
            data,
            provenance: self.provenance.clone(),
        }
    }

    /// Binary layout: `GEMB`, version u32, count u64, dim u32, then
    /// `count × dim` f32 values, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.count() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], provenance: impl Into<String>) -> Result<Self> {
        let bad = |m: &str| GraphError::Embedding(m.to_string());
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(bad("missing GEMB header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(GraphError::Embedding(format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let dim = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() != count * dim * 4 {
            return Err(GraphError::Embedding(format!(
                "expected {} payload bytes for {count}x{dim}, found {}",
                count * dim * 4,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(dim, data, provenance)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, format!("file:{}", path.display()))
    }
}
