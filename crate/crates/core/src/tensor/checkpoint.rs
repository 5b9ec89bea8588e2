//! Directory container: `index.json` (name → shape, dtype, byte offset)
//! plus one little-endian f32 blob `tensors.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

pub const INDEX_FILE: &str = "index.json";
pub const BLOB_FILE: &str = "tensors.bin";
const FORMAT: &str = "gaga-tensors";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    format: String,
    version: u32,
    metadata: BTreeMap<String, String>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| TensorError::Format(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: blob.len() as u64,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let index = Index {
            format: FORMAT.into(),
            version: 1,
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let json = serde_json::to_string_pretty(&index).map_err(|e| TensorError::Format(e.to_string()))?;
        fs::write(dir.join(INDEX_FILE), json + "\n")?;
        fs::write(dir.join(BLOB_FILE), blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(INDEX_FILE))?;
        let index: Index = serde_json::from_str(&text).map_err(|e| TensorError::Format(e.to_string()))?;
        if index.format != FORMAT || index.version != 1 {
            return Err(TensorError::Format(format!(
                "unsupported container {} v{}",
                index.format, index.version
            )));
        }
        let blob = fs::read(dir.join(BLOB_FILE))?;
        let mut tensors = BTreeMap::new();
        for e in index.tensors {
            if e.dtype != "f32" {
                return Err(TensorError::Format(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + count * 4;
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| TensorError::Format(format!("{}: blob too short", e.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(e.name, Tensor::new(e.shape, data)?);
        }
        Ok(Self {
            metadata: index.metadata,
            tensors,
        })
    }
}
