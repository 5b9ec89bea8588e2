//! Flat run configuration with per-stage content hashes.
//!
//! Each stage hashes only the settings that affect its outputs, chained to
//! the hash of the stage before it, so changing a late-stage setting keeps
//! earlier artifacts valid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aligner::{AlignConfig, GcnConfig};
use crate::downstream::{FinetuneConfig, FusionConfig, Task};
use crate::graph::{SynthSpec, VocabSpec};
use crate::providers::content_hash;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedBackend {
    Hash,
    File,
    Http,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotatorBackend {
    Mock,
    Chat,
}

/// Every knob of a run. Values marked "reference setup" in the CLI help
/// mirror the published experimental setup; the rest are artifact choices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub task: Task,

    /// Node JSONL and edge list; when unset a synthetic graph is generated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nodes_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edges_file: Option<PathBuf>,
    pub synth_classes: usize,
    pub synth_nodes_per_class: usize,
    pub synth_p_in: f64,
    pub synth_p_out: f64,
    pub synth_keywords_per_class: usize,
    pub synth_noise_words: usize,
    pub synth_tokens_per_node: usize,
    pub synth_keyword_rate: f64,
    pub synth_keyword_confusion: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_edge_cap: Option<usize>,

    pub link_valid_fraction: f64,
    pub link_test_fraction: f64,
    pub link_negatives: usize,

    pub embed_backend: EmbedBackend,
    pub embed_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anno_embed_file: Option<PathBuf>,
    pub embed_model: String,

    pub node_fraction: f64,
    /// Edges to annotate for the link task; unset means ⌈√|E|⌉.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge_budget: Option<usize>,
    pub clusters: usize,
    pub kmeans_max_iter: usize,

    pub annotator: AnnotatorBackend,
    /// Prompt template id; unset means `generic` for nodes, `link` for edges.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    pub categories: String,
    pub llm_model: String,
    pub temperature: f64,
    pub parallelism: usize,
    pub max_retries: u32,
    pub retry_base_ms: u64,
    pub price_prompt_per_1k: f64,
    pub price_completion_per_1k: f64,

    pub knn_k: usize,

    pub hops: usize,
    pub node_cap: usize,
    pub alpha: f64,
    pub k_p: usize,
    pub align_lr: f64,
    pub align_epochs: usize,
    pub align_batch: usize,
    pub gamma: f64,
    pub gcn_layers: usize,
    pub gcn_hidden: usize,
    pub adapter_noise: f64,

    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    pub patience: usize,
    /// Attention projection width; unset means the embedding dimension.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dk: Option<usize>,
    pub residual: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vocab = VocabSpec::default();
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            task: Task::Node,
            nodes_file: None,
            edges_file: None,
            synth_classes: 4,
            synth_nodes_per_class: 125,
            synth_p_in: 0.05,
            synth_p_out: 0.005,
            synth_keywords_per_class: vocab.keywords_per_class,
            synth_noise_words: vocab.noise_words,
            synth_tokens_per_node: vocab.tokens_per_node,
            synth_keyword_rate: vocab.keyword_rate,
            synth_keyword_confusion: vocab.keyword_confusion,
            synth_edge_cap: None,
            link_valid_fraction: 0.1,
            link_test_fraction: 0.1,
            link_negatives: 100,
            embed_backend: EmbedBackend::Hash,
            embed_dim: 64,
            embed_file: None,
            anno_embed_file: None,
            embed_model: String::new(),
            node_fraction: 0.01,
            edge_budget: None,
            clusters: 40,
            kmeans_max_iter: 100,
            annotator: AnnotatorBackend::Mock,
            template: None,
            categories: String::new(),
            llm_model: String::new(),
            temperature: 0.0,
            parallelism: 4,
            max_retries: 3,
            retry_base_ms: 500,
            price_prompt_per_1k: 0.0,
            price_completion_per_1k: 0.0,
            knn_k: 5,
            hops: 2,
            node_cap: 256,
            alpha: 0.6,
            k_p: 40,
            align_lr: 5e-5,
            align_epochs: 200,
            align_batch: 32,
            gamma: 0.99,
            gcn_layers: 4,
            gcn_hidden: 64,
            adapter_noise: 0.01,
            finetune_lr: 1e-3,
            finetune_epochs: 200,
            patience: 20,
            dk: None,
            residual: false,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Invalid(msg()))
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    check((0.0..=1.0).contains(&v), || format!("{name} = {v} must lie in [0, 1]"))
}

fn positive(name: &str, v: usize) -> Result<()> {
    check(v > 0, || format!("{name} must be positive"))
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative data paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.nodes_file, &mut cfg.edges_file, &mut cfg.embed_file, &mut cfg.anno_embed_file]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        check(self.schema_version == SCHEMA_VERSION, || {
            format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version)
        })?;
        check(self.nodes_file.is_some() == self.edges_file.is_some(), || {
            "nodes_file and edges_file must be given together".into()
        })?;
        if self.nodes_file.is_none() {
            positive("synth_classes", self.synth_classes)?;
            positive("synth_nodes_per_class", self.synth_nodes_per_class)?;
            check(0.0 <= self.synth_p_out && self.synth_p_out < self.synth_p_in && self.synth_p_in <= 1.0, || {
                format!("need 0 <= synth_p_out < synth_p_in <= 1, got {} and {}", self.synth_p_out, self.synth_p_in)
            })?;
            positive("synth_keywords_per_class", self.synth_keywords_per_class)?;
            positive("synth_noise_words", self.synth_noise_words)?;
            positive("synth_tokens_per_node", self.synth_tokens_per_node)?;
            unit("synth_keyword_rate", self.synth_keyword_rate)?;
            unit("synth_keyword_confusion", self.synth_keyword_confusion)?;
        }
        unit("link_valid_fraction", self.link_valid_fraction)?;
        unit("link_test_fraction", self.link_test_fraction)?;
        check(self.link_valid_fraction + self.link_test_fraction < 1.0, || {
            "link_valid_fraction + link_test_fraction must leave training edges".into()
        })?;
        positive("link_negatives", self.link_negatives)?;
        positive("embed_dim", self.embed_dim)?;
        if self.embed_backend == EmbedBackend::File {
            check(self.embed_file.is_some() && self.anno_embed_file.is_some(), || {
                "the file embedding backend needs embed_file and anno_embed_file".into()
            })?;
        }
        check(self.node_fraction > 0.0 && self.node_fraction <= 1.0, || {
            format!("node_fraction = {} must lie in (0, 1]", self.node_fraction)
        })?;
        if let Some(b) = self.edge_budget {
            positive("edge_budget", b)?;
        }
        positive("clusters", self.clusters)?;
        positive("kmeans_max_iter", self.kmeans_max_iter)?;
        check(crate::providers::PromptTemplate::builtin(self.template_id()).is_ok(), || {
            format!("unknown template {:?}", self.template_id())
        })?;
        check((0.0..=2.0).contains(&self.temperature), || "temperature must lie in [0, 2]".into())?;
        positive("parallelism", self.parallelism)?;
        check(self.max_retries <= 3, || "max_retries is capped at 3".into())?;
        check(self.price_prompt_per_1k >= 0.0 && self.price_completion_per_1k >= 0.0, || {
            "prices must be non-negative".into()
        })?;
        positive("knn_k", self.knn_k)?;
        positive("node_cap", self.node_cap)?;
        unit("alpha", self.alpha)?;
        positive("k_p", self.k_p)?;
        check(self.align_lr > 0.0 && self.finetune_lr > 0.0, || "learning rates must be positive".into())?;
        check(self.align_batch >= 2, || "align_batch must be at least 2".into())?;
        check((0.0..1.0).contains(&self.gamma), || "gamma must lie in [0, 1)".into())?;
        positive("gcn_layers", self.gcn_layers)?;
        positive("gcn_hidden", self.gcn_hidden)?;
        check(self.adapter_noise >= 0.0, || "adapter_noise must be non-negative".into())?;
        if let Some(dk) = self.dk {
            positive("dk", dk)?;
            check(!self.residual || dk == self.embed_dim, || "residual fusion needs dk equal to embed_dim".into())?;
        }
        Ok(())
    }

    /// Applies `key=value` for a sweepable key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(format!("{key}={value}: {e}"));
        match key {
            "alpha" => self.alpha = value.parse().map_err(|e| bad(&e))?,
            "k_p" | "kp" => self.k_p = value.parse().map_err(|e| bad(&e))?,
            "node_fraction" | "budget" => self.node_fraction = value.parse().map_err(|e| bad(&e))?,
            "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
            "hops" => self.hops = value.parse().map_err(|e| bad(&e))?,
            _ => {
                return Err(ConfigError::Invalid(format!(
                    "cannot sweep {key:?}; sweepable keys are alpha, k_p, node_fraction, seed, hops"
                )))
            }
        }
        self.validate()
    }

    pub fn template_id(&self) -> &str {
        match (&self.template, self.task) {
            (Some(t), _) => t,
            (None, Task::Node) => "generic",
            (None, Task::Link) => "link",
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            classes: self.synth_classes,
            nodes_per_class: self.synth_nodes_per_class,
            p_in: self.synth_p_in,
            p_out: self.synth_p_out,
            vocab: VocabSpec {
                keywords_per_class: self.synth_keywords_per_class,
                noise_words: self.synth_noise_words,
                tokens_per_node: self.synth_tokens_per_node,
                keyword_rate: self.synth_keyword_rate,
                keyword_confusion: self.synth_keyword_confusion,
            },
            edge_cap: self.synth_edge_cap,
            seed: self.seed,
        }
    }

    pub fn align_config(&self) -> AlignConfig {
        AlignConfig {
            epochs: self.align_epochs,
            batch_size: self.align_batch,
            hops: self.hops,
            node_cap: self.node_cap,
            alpha: self.alpha,
            k_p: self.k_p,
            lr: self.align_lr,
            gamma: self.gamma,
            gcn: GcnConfig {
                layers: self.gcn_layers,
                hidden: self.gcn_hidden,
                adapter_noise: self.adapter_noise,
            },
            seed: crate::seed::derive(self.seed, "align"),
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.finetune_epochs,
            lr: self.finetune_lr,
            patience: self.patience,
            fusion: FusionConfig {
                dk: self.dk,
                residual: self.residual,
            },
            seed: crate::seed::derive(self.seed, "finetune"),
        }
    }

    pub fn hashes(&self) -> StageHashes {
        let chain = |prev: &str, part: serde_json::Value| content_hash(&format!("{prev}\n{part}"))[..16].to_string();
        let data = chain(
            "gaga-v1",
            serde_json::json!({
                "seed": self.seed, "task": self.task,
                "nodes_file": self.nodes_file.as_ref().map(|p| file_digest(p)),
                "edges_file": self.edges_file.as_ref().map(|p| file_digest(p)),
                "synth": if self.nodes_file.is_none() { Some(self.synth_spec()) } else { None },
                "link": [self.link_valid_fraction, self.link_test_fraction],
                "link_negatives": self.link_negatives,
            }),
        );
        let select = chain(
            &data,
            serde_json::json!({
                "embed_backend": self.embed_backend, "embed_dim": self.embed_dim,
                "embed_file": self.embed_file.as_ref().map(|p| file_digest(p)),
                "embed_model": self.embed_model,
                "node_fraction": self.node_fraction, "edge_budget": self.edge_budget,
                "clusters": self.clusters, "kmeans_max_iter": self.kmeans_max_iter,
            }),
        );
        let annotate = chain(
            &select,
            serde_json::json!({
                "annotator": self.annotator, "template": self.template_id(), "categories": self.categories,
                "llm_model": self.llm_model, "temperature": self.temperature,
            }),
        );
        let anno_graph = chain(
            &annotate,
            serde_json::json!({
                "knn_k": self.knn_k,
                "anno_embed_file": self.anno_embed_file.as_ref().map(|p| file_digest(p)),
            }),
        );
        let align = chain(&anno_graph, serde_json::to_value(self.align_config()).expect("serializable"));
        let finetune = chain(&align, serde_json::to_value(self.finetune_config()).expect("serializable"));
        StageHashes {
            data,
            select,
            annotate,
            anno_graph,
            align,
            finetune,
        }
    }
}

/// Content digest of an input file, or its path when unreadable.
fn file_digest(path: &Path) -> String {
    match std::fs::read(path) {
        Ok(bytes) => content_hash(&String::from_utf8_lossy(&bytes)),
        Err(_) => path.display().to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageHashes {
    pub data: String,
    pub select: String,
    pub annotate: String,
    pub anno_graph: String,
    pub align: String,
    pub finetune: String,
}
