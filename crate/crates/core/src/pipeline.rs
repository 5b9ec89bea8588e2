//! Stage runner. Every stage reads its inputs from the output directory,
//! checks the config hash stamped on them, and writes its own artifacts
//! stamped with its stage hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aligner::{align_train, AlignError, Alignment};
use crate::annograph::{build_annotation_graph, AnnoGraphError, AnnotationGraph};
use crate::config::{AnnotatorBackend, ConfigError, EmbedBackend, RunConfig, StageHashes};
use crate::downstream::{
    evaluate_link, evaluate_node, finetune_link, finetune_node, prototype_distances, write_prototype_distances,
    write_train_log, DownstreamError, EvalReport, Model, Task,
};
use crate::graph::{load_tag, make_edge_split, save_tag, synth_tag, EdgeSplit, EmbeddingTable, GraphError, SplitFractions, Tag, HEADER_PREFIX};
use crate::providers::{
    annotate, read_records, write_records, AnnotateOptions, AnnotationCache, Annotator, ChatAnnotator, Clock, Embedder,
    FileEmbedder, HashEmbedder, HttpEmbedder, MockAnnotator, Pricing, PromptTemplate, ProviderError, RetryPolicy,
};
use crate::selector::{edge_budget, kmeans, node_budget, node_scores, select_edges, top_nodes, SelectError, SelectionResult};
use crate::tensor::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Select,
    Annotate,
    BuildAnnoGraph,
    Align,
    Finetune,
    Evaluate,
    Pipeline,
}

impl Stage {
    pub const ORDER: [Stage; 7] = [
        Stage::Synth,
        Stage::Select,
        Stage::Annotate,
        Stage::BuildAnnoGraph,
        Stage::Align,
        Stage::Finetune,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Select => "select",
            Stage::Annotate => "annotate",
            Stage::BuildAnnoGraph => "build-anno-graph",
            Stage::Align => "align",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
            Stage::Pipeline => "pipeline",
        }
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ORDER
            .into_iter()
            .chain([Stage::Pipeline])
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::Validation(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing prerequisite {}: run `gaga {stage}` first", path.display())]
    Missing { path: PathBuf, stage: &'static str },
    #[error("{0}")]
    Validation(String),
    #[error("provider failure: {0}")]
    Provider(String),
    #[error("{0}")]
    Internal(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Missing { .. } => 2,
            PipelineError::Validation(_) => 3,
            PipelineError::Provider(_) => 4,
            PipelineError::Internal(_) => 1,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn internal(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Internal(e.to_string())
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        internal(e)
    }
}

impl From<serde_json::Error> for PipelineError {
    fn from(e: serde_json::Error) -> Self {
        PipelineError::Validation(format!("malformed artifact: {e}"))
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(e) => internal(e),
            e => PipelineError::Validation(e.to_string()),
        }
    }
}

impl From<GraphError> for PipelineError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::Io(e) => internal(e),
            e => PipelineError::Validation(e.to_string()),
        }
    }
}

impl From<SelectError> for PipelineError {
    fn from(e: SelectError) -> Self {
        match e {
            SelectError::Io(e) => internal(e),
            e => PipelineError::Validation(e.to_string()),
        }
    }
}

impl From<ProviderError> for PipelineError {
    fn from(e: ProviderError) -> Self {
        match e {
            ProviderError::Config(_) | ProviderError::MissingField(_) => PipelineError::Validation(e.to_string()),
            ProviderError::Graph(g) => g.into(),
            ProviderError::Io(e) => internal(e),
            ProviderError::Json(e) => e.into(),
            e => PipelineError::Provider(e.to_string()),
        }
    }
}

impl From<AnnoGraphError> for PipelineError {
    fn from(e: AnnoGraphError) -> Self {
        match e {
            AnnoGraphError::Provider(p) => p.into(),
            AnnoGraphError::Graph(g) => g.into(),
            e => PipelineError::Validation(e.to_string()),
        }
    }
}

impl From<TensorError> for PipelineError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Format(_) => PipelineError::Validation(e.to_string()),
            e => internal(e),
        }
    }
}

impl From<AlignError> for PipelineError {
    fn from(e: AlignError) -> Self {
        match e {
            AlignError::Tensor(t) => t.into(),
            AlignError::Select(s) => s.into(),
            AlignError::Graph(g) => g.into(),
            AlignError::Io(e) => internal(e),
            AlignError::Json(e) => e.into(),
            e => PipelineError::Validation(e.to_string()),
        }
    }
}

impl From<DownstreamError> for PipelineError {
    fn from(e: DownstreamError) -> Self {
        match e {
            DownstreamError::Align(a) => a.into(),
            DownstreamError::Tensor(t) => t.into(),
            DownstreamError::Io(e) => internal(e),
            DownstreamError::Json(e) => e.into(),
            e => PipelineError::Validation(e.to_string()),
        }
    }
}

pub const NODES_FILE: &str = "graph.nodes.jsonl";
pub const EDGES_FILE: &str = "graph.edges.txt";
pub const EDGE_SPLIT_FILE: &str = "edge_split.json";
pub const TEXT_EMB_FILE: &str = "text.emb";
pub const TEXT_EMB_META: &str = "text.emb.json";
pub const SELECTION_FILE: &str = "selection.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const FAILURES_FILE: &str = "annotation_failures.json";
pub const COST_FILE: &str = "annotation_cost.json";
pub const ANNO_STEM: &str = "anno_graph";
pub const ALIGN_DIR: &str = "align";
pub const MODEL_DIR: &str = "model";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "eval_report.json";
pub const PROTO_DIST_FILE: &str = "prototype_distances.csv";
pub const GAUGES_FILE: &str = "gauges.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".gaga.lock";

/// Hash-stamped JSON wrapper for artifacts without a comment header.
#[derive(Serialize, Deserialize)]
struct Stamped<T> {
    config_hash: String,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize, Deserialize)]
struct SplitBody {
    split: EdgeSplit,
}

#[derive(Serialize, Deserialize)]
struct EmbMeta {
    provider: String,
    dim: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub config_hash: String,
}

/// Wall time and peak resident memory of a stage, kept apart from the
/// deterministic artifacts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Gauge {
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak_rss_kb: Option<u64>,
}

/// `VmHWM` from `/proc/self/status`, where available.
pub fn peak_rss_kb() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

/// First-line `# gaga config_hash=` stamp of a text artifact.
pub fn read_header(path: &Path) -> Option<String> {
    let text = fs::read_to_string(path).ok()?;
    text.lines().next()?.strip_prefix(HEADER_PREFIX).map(str::to_string)
}

/// Exclusive ownership of an output directory for the life of the guard.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Validation(format!(
                "{} is in use by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub struct Pipeline {
    pub config: RunConfig,
    pub out: PathBuf,
    /// Holds the annotation and embedding caches.
    pub cache_dir: PathBuf,
    hashes: StageHashes,
}

impl Pipeline {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out = out.into();
        let cache_dir = std::env::var_os("GAGA_CACHE_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| out.join("cache"));
        let hashes = config.hashes();
        Ok(Self {
            config,
            out,
            cache_dir,
            hashes,
        })
    }

    pub fn hashes(&self) -> &StageHashes {
        &self.hashes
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, stage: Stage) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::Missing {
                path: p,
                stage: stage.name(),
            })
        }
    }

    fn check_hash(&self, path: &Path, found: Option<&str>, expected: &str, stage: Stage) -> Result<()> {
        match found {
            Some(h) if h == expected => Ok(()),
            found => Err(PipelineError::Validation(format!(
                "{} carries config_hash={} but the current config expects {expected}; rerun `gaga {}`",
                path.display(),
                found.unwrap_or("<none>"),
                stage.name()
            ))),
        }
    }

    fn check_header(&self, name: &str, expected: &str, stage: Stage) -> Result<PathBuf> {
        let p = self.require(name, stage)?;
        self.check_hash(&p, read_header(&p).as_deref(), expected, stage)?;
        Ok(p)
    }

    fn record(&self, stage: Stage, hash: &str, artifacts: &[&str]) -> Result<()> {
        let path = self.path(MANIFEST_FILE);
        let mut manifest: BTreeMap<String, ManifestEntry> = match fs::read_to_string(&path) {
            Ok(t) => serde_json::from_str(&t)?,
            Err(_) => BTreeMap::new(),
        };
        for a in artifacts {
            manifest.insert(
                a.to_string(),
                ManifestEntry {
                    stage: stage.name().into(),
                    config_hash: hash.into(),
                },
            );
        }
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    fn gauge(&self, stage: Stage, elapsed: Duration) -> Result<()> {
        let path = self.path(GAUGES_FILE);
        let mut gauges: BTreeMap<String, Gauge> = match fs::read_to_string(&path) {
            Ok(t) => serde_json::from_str(&t).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        gauges.insert(
            stage.name().into(),
            Gauge {
                seconds: elapsed.as_secs_f64(),
                peak_rss_kb: peak_rss_kb(),
            },
        );
        fs::write(&path, serde_json::to_string_pretty(&gauges)? + "\n")?;
        Ok(())
    }

    /// Runs one stage, or every stage in order for [`Stage::Pipeline`].
    /// Takes the directory lock for the duration.
    pub fn run(&self, stage: Stage) -> Result<()> {
        let _lock = RunLock::acquire(&self.out)?;
        fs::write(self.path("run_config.toml"), self.config.to_toml())?;
        let stages: Vec<Stage> = if stage == Stage::Pipeline { Stage::ORDER.to_vec() } else { vec![stage] };
        for s in stages {
            let start = Instant::now();
            log::info!("stage {}", s.name());
            match s {
                Stage::Synth => self.synth()?,
                Stage::Select => self.select()?,
                Stage::Annotate => self.annotate()?,
                Stage::BuildAnnoGraph => self.build_anno_graph()?,
                Stage::Align => self.align()?,
                Stage::Finetune => self.finetune()?,
                Stage::Evaluate => {
                    self.evaluate()?;
                }
                Stage::Pipeline => unreachable!(),
            }
            self.gauge(s, start.elapsed())?;
        }
        Ok(())
    }

    pub fn synth(&self) -> Result<()> {
        let c = &self.config;
        let h = &self.hashes.data;
        let tag = match (&c.nodes_file, &c.edges_file) {
            (Some(n), Some(e)) => load_tag(n, e, None)?,
            _ => synth_tag(&c.synth_spec())?,
        };
        let mut artifacts = vec![NODES_FILE, EDGES_FILE];
        match c.task {
            Task::Node => {
                if !tag.has_labels() {
                    return Err(PipelineError::Validation("node classification needs labeled nodes".into()));
                }
            }
            Task::Link => {
                let fractions = SplitFractions {
                    train: 1.0 - c.link_valid_fraction - c.link_test_fraction,
                    valid: c.link_valid_fraction,
                    test: c.link_test_fraction,
                };
                let split = make_edge_split(&tag, fractions, c.link_negatives, crate::seed::derive(c.seed, "edge_split"))?;
                let stamped = Stamped {
                    config_hash: h.clone(),
                    body: SplitBody { split },
                };
                fs::write(self.path(EDGE_SPLIT_FILE), serde_json::to_string(&stamped)? + "\n")?;
                artifacts.push(EDGE_SPLIT_FILE);
            }
        }
        save_tag(&tag, &self.path(NODES_FILE), &self.path(EDGES_FILE), Some(h))?;
        self.record(Stage::Synth, h, &artifacts)
    }

    pub fn load_tag(&self) -> Result<Tag> {
        let n = self.check_header(NODES_FILE, &self.hashes.data, Stage::Synth)?;
        let e = self.check_header(EDGES_FILE, &self.hashes.data, Stage::Synth)?;
        Ok(load_tag(&n, &e, None)?)
    }

    pub fn load_split(&self) -> Result<EdgeSplit> {
        let p = self.require(EDGE_SPLIT_FILE, Stage::Synth)?;
        let s: Stamped<SplitBody> = serde_json::from_str(&fs::read_to_string(&p)?)?;
        self.check_hash(&p, Some(&s.config_hash), &self.hashes.data, Stage::Synth)?;
        Ok(s.body.split)
    }

    /// Graph seen by alignment and message passing: training edges only for
    /// link prediction.
    fn working_tag(&self, tag: &Tag) -> Result<(Tag, Option<EdgeSplit>)> {
        match self.config.task {
            Task::Node => Ok((tag.clone(), None)),
            Task::Link => {
                let split = self.load_split()?;
                Ok((tag.with_edges(&split.train)?, Some(split)))
            }
        }
    }

    fn embedder(&self, file: Option<&PathBuf>) -> Result<Box<dyn Embedder>> {
        let c = &self.config;
        Ok(match c.embed_backend {
            EmbedBackend::Hash => Box::new(HashEmbedder::new(c.embed_dim)?),
            EmbedBackend::File => {
                let path = file.ok_or_else(|| PipelineError::Validation("file embedding backend needs a file".into()))?;
                Box::new(FileEmbedder::open(path)?)
            }
            EmbedBackend::Http => {
                let endpoint = std::env::var("GAGA_EMBED_ENDPOINT")
                    .map_err(|_| PipelineError::Validation("GAGA_EMBED_ENDPOINT is not set".into()))?;
                Box::new(HttpEmbedder {
                    endpoint,
                    api_key: std::env::var("GAGA_LLM_API_KEY").ok(),
                    model: c.embed_model.clone(),
                    dim: c.embed_dim,
                    retry: self.retry(),
                    cache_file: Some(self.cache_dir.join("embeddings.jsonl")),
                    batch_size: 64,
                    timeout: Duration::from_secs(60),
                })
            }
        })
    }

    fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.config.max_retries,
            base_delay: Duration::from_millis(self.config.retry_base_ms),
        }
    }

    fn embed_checked(&self, embedder: &dyn Embedder, texts: &[String]) -> Result<EmbeddingTable> {
        let table = embedder.embed(texts)?;
        if table.dim() != self.config.embed_dim {
            return Err(ProviderError::DimMismatch {
                expected: self.config.embed_dim,
                got: table.dim(),
            }
            .into());
        }
        Ok(table)
    }

    pub fn select(&self) -> Result<()> {
        let c = &self.config;
        let h = &self.hashes.select;
        let tag = self.load_tag()?;
        let embedder = self.embedder(c.embed_file.as_ref())?;
        fs::create_dir_all(&self.cache_dir)?;
        let emb = self.embed_checked(embedder.as_ref(), tag.texts())?;
        let clusters = c.clusters.min(tag.num_nodes());
        if clusters < c.clusters {
            log::warn!("clusters {} clamped to {} nodes", c.clusters, clusters);
        }
        let clustering = kmeans(&emb, clusters, c.kmeans_max_iter, crate::seed::derive(c.seed, "select/kmeans"))?;
        let scores = node_scores(&emb, &clustering);
        let selection = match c.task {
            Task::Node => top_nodes(&scores, node_budget(c.node_fraction, tag.num_nodes())),
            Task::Link => {
                let split = self.load_split()?;
                let budget = c.edge_budget.unwrap_or_else(|| edge_budget(tag.num_edges()));
                select_edges(&split.train, &scores, budget)?
            }
        };
        emb.save(&self.path(TEXT_EMB_FILE))?;
        let meta = Stamped {
            config_hash: h.clone(),
            body: EmbMeta {
                provider: embedder.provider_id(),
                dim: emb.dim(),
            },
        };
        fs::write(self.path(TEXT_EMB_META), serde_json::to_string_pretty(&meta)? + "\n")?;
        selection.save(&self.path(SELECTION_FILE), Some(h))?;
        self.record(Stage::Select, h, &[TEXT_EMB_FILE, TEXT_EMB_META, SELECTION_FILE])
    }

    pub fn load_text_emb(&self) -> Result<EmbeddingTable> {
        let meta_path = self.require(TEXT_EMB_META, Stage::Select)?;
        let meta: Stamped<EmbMeta> = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
        self.check_hash(&meta_path, Some(&meta.config_hash), &self.hashes.select, Stage::Select)?;
        let p = self.require(TEXT_EMB_FILE, Stage::Select)?;
        Ok(EmbeddingTable::load(&p)?)
    }

    fn annotator(&self) -> Result<Box<dyn Annotator>> {
        let c = &self.config;
        Ok(match c.annotator {
            AnnotatorBackend::Mock => {
                let mut m = MockAnnotator::new(crate::seed::derive(c.seed, "mock"));
                m.keywords_per_class = c.synth_keywords_per_class;
                Box::new(m)
            }
            AnnotatorBackend::Chat => Box::new(ChatAnnotator::from_env(&c.llm_model, c.temperature)?),
        })
    }

    pub fn annotate(&self) -> Result<()> {
        let c = &self.config;
        let h = &self.hashes.annotate;
        let tag = self.load_tag()?;
        let sel_path = self.check_header(SELECTION_FILE, &self.hashes.select, Stage::Select)?;
        let selection = SelectionResult::load(&sel_path)?;
        let template = PromptTemplate::builtin(c.template_id())?;
        let annotator = self.annotator()?;
        fs::create_dir_all(&self.cache_dir)?;
        let opts = AnnotateOptions {
            retry: self.retry(),
            parallelism: c.parallelism,
            cache: Some(AnnotationCache::new(self.cache_dir.join("annotations.jsonl"))),
            clock: match c.annotator {
                AnnotatorBackend::Mock => Clock::Fixed(chrono::DateTime::UNIX_EPOCH),
                AnnotatorBackend::Chat => Clock::System,
            },
            pricing: Pricing {
                prompt_per_1k: c.price_prompt_per_1k,
                completion_per_1k: c.price_completion_per_1k,
            },
            categories: c.categories.clone(),
        };
        let outcome = annotate(&tag, &selection, &template, annotator.as_ref(), &opts)?;
        write_records(&self.path(ANNOTATIONS_FILE), &outcome.records, Some(h))?;
        fs::write(self.path(FAILURES_FILE), serde_json::to_string_pretty(&outcome.failures)? + "\n")?;
        fs::write(self.path(COST_FILE), serde_json::to_string_pretty(&outcome.cost)? + "\n")?;
        self.record(Stage::Annotate, h, &[ANNOTATIONS_FILE, FAILURES_FILE, COST_FILE])?;
        log::info!(
            "annotated {} targets ({} cached, {} failed, ${:.4})",
            outcome.records.len(),
            outcome.cost.cache_hits,
            outcome.failures.len(),
            outcome.cost.cost_usd
        );
        if !outcome.failures.is_empty() {
            return Err(PipelineError::Provider(format!(
                "{} of {} annotations failed; see {}",
                outcome.failures.len(),
                selection.len(),
                self.path(FAILURES_FILE).display()
            )));
        }
        Ok(())
    }

    /// k' actually used: at most one less than the number of annotations.
    pub fn effective_knn_k(&self, annotations: usize) -> usize {
        let k = self.config.knn_k.min(annotations.saturating_sub(1));
        if k < self.config.knn_k {
            log::warn!("k'={} clamped to {k} for {annotations} annotations", self.config.knn_k);
        }
        k
    }

    pub fn build_anno_graph(&self) -> Result<()> {
        let h = &self.hashes.anno_graph;
        let rec_path = self.check_header(ANNOTATIONS_FILE, &self.hashes.annotate, Stage::Annotate)?;
        let records = read_records(&rec_path)?;
        if records.len() < 2 {
            return Err(PipelineError::Validation(format!(
                "{} annotation(s) cannot form an annotation graph; raise node_fraction or edge_budget",
                records.len()
            )));
        }
        let embedder = self.embedder(self.config.anno_embed_file.as_ref())?;
        let texts: Vec<String> = records.iter().map(|r| r.annotation_text.clone()).collect();
        let emb = self.embed_checked(embedder.as_ref(), &texts)?;
        let k = self.effective_knn_k(records.len());
        let graph = build_annotation_graph(records, emb, k)?;
        graph.save(&self.out, ANNO_STEM, Some(h))?;
        let (n, e, m) = (
            format!("{ANNO_STEM}.nodes.jsonl"),
            format!("{ANNO_STEM}.edges.txt"),
            format!("{ANNO_STEM}.emb"),
        );
        self.record(Stage::BuildAnnoGraph, h, &[&n, &e, &m])
    }

    pub fn load_anno_graph(&self) -> Result<AnnotationGraph> {
        let nodes = format!("{ANNO_STEM}.nodes.jsonl");
        self.check_header(&nodes, &self.hashes.anno_graph, Stage::BuildAnnoGraph)?;
        self.check_header(&format!("{ANNO_STEM}.edges.txt"), &self.hashes.anno_graph, Stage::BuildAnnoGraph)?;
        self.require(&format!("{ANNO_STEM}.emb"), Stage::BuildAnnoGraph)?;
        let rec_path = self.check_header(ANNOTATIONS_FILE, &self.hashes.annotate, Stage::Annotate)?;
        let n = read_records(&rec_path)?.len();
        Ok(AnnotationGraph::load(&self.out, ANNO_STEM, &rec_path, self.effective_knn_k(n))?)
    }

    pub fn align(&self) -> Result<()> {
        let h = &self.hashes.align;
        let tag = self.load_tag()?;
        let (work, _) = self.working_tag(&tag)?;
        let emb = self.load_text_emb()?;
        let anno = self.load_anno_graph()?;
        let alignment = align_train(&work, &emb, &anno, &self.config.align_config())?;
        let dir = self.path(ALIGN_DIR);
        alignment.save(&dir, BTreeMap::from([("config_hash".to_string(), h.clone())]))?;
        self.record(Stage::Align, h, &[ALIGN_DIR])
    }

    pub fn load_alignment(&self) -> Result<Alignment> {
        let dir = self.require(ALIGN_DIR, Stage::Align)?;
        let (a, meta) = Alignment::load(&dir)?;
        self.check_hash(&dir, meta.get("config_hash").map(String::as_str), &self.hashes.align, Stage::Align)?;
        Ok(a)
    }

    pub fn finetune(&self) -> Result<()> {
        let h = &self.hashes.finetune;
        let tag = self.load_tag()?;
        let emb = self.load_text_emb()?;
        let alignment = self.load_alignment()?;
        let cfg = self.config.finetune_config();
        let out = match self.config.task {
            Task::Node => finetune_node(&tag, &emb, &alignment.encoder, &alignment.codebook, &cfg, h)?,
            Task::Link => {
                let split = self.load_split()?;
                finetune_link(&tag, &split, &emb, &alignment.encoder, &alignment.codebook, &cfg, h)?
            }
        };
        let meta = BTreeMap::from([
            ("config_hash".to_string(), h.clone()),
            ("epochs_run".to_string(), out.report.epochs_run.to_string()),
            ("best_epoch".to_string(), out.report.best_epoch.to_string()),
        ]);
        out.model.save(&self.path(MODEL_DIR), meta)?;
        write_train_log(&self.path(TRAIN_LOG_FILE), &out.log)?;
        self.record(Stage::Finetune, h, &[MODEL_DIR, TRAIN_LOG_FILE])
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        let h = &self.hashes.finetune;
        let tag = self.load_tag()?;
        let emb = self.load_text_emb()?;
        let dir = self.require(MODEL_DIR, Stage::Finetune)?;
        let (model, meta) = Model::load(&dir)?;
        self.check_hash(&dir, meta.get("config_hash").map(String::as_str), h, Stage::Finetune)?;
        let count = |key: &str| -> Result<usize> {
            meta.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| PipelineError::Validation(format!("{} lacks {key}", dir.display())))
        };
        let (splits, edges) = match self.config.task {
            Task::Node => (evaluate_node(&model, &tag, &emb)?, tag.edges()),
            Task::Link => {
                let split = self.load_split()?;
                (evaluate_link(&model, &split, &emb)?, split.train)
            }
        };
        let report = EvalReport {
            task: self.config.task,
            config_hash: h.clone(),
            epochs_run: count("epochs_run")?,
            best_epoch: count("best_epoch")?,
            splits,
        };
        report.save(&self.path(REPORT_FILE))?;
        write_prototype_distances(&self.path(PROTO_DIST_FILE), &prototype_distances(&model, &emb, &edges)?)?;
        self.record(Stage::Evaluate, h, &[REPORT_FILE, PROTO_DIST_FILE])?;
        Ok(report)
    }

    pub fn report(&self) -> Result<EvalReport> {
        let p = self.require(REPORT_FILE, Stage::Evaluate)?;
        let r = EvalReport::load(&p)?;
        self.check_hash(&p, Some(&r.config_hash), &self.hashes.finetune, Stage::Evaluate)?;
        Ok(r)
    }
}

/// Headline validation and test metric: accuracy for node classification,
/// MRR@10 for link prediction.
pub fn headline(report: &EvalReport) -> (Option<f64>, Option<f64>) {
    let pick = |split: &str| {
        report.splits.get(split).and_then(|m| match report.task {
            Task::Node => m.accuracy,
            Task::Link => m.mrr_at_10,
        })
    };
    (pick("valid"), pick("test"))
}

/// Parses `KEY=v1,v2,...`.
pub fn parse_sweep(spec: &str) -> Result<(String, Vec<String>)> {
    let (key, list) = spec
        .split_once('=')
        .ok_or_else(|| PipelineError::Validation(format!("--sweep expects KEY=LIST, got {spec:?}")))?;
    let values: Vec<String> = list.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if key.is_empty() || values.is_empty() {
        return Err(PipelineError::Validation(format!("--sweep expects KEY=LIST, got {spec:?}")));
    }
    Ok((key.trim().to_string(), values))
}

/// One full pipeline per value in `out/sweep/<key>=<value>`, sharing the
/// annotation cache, plus `out/sweep_<key>.csv` with one row per value.
pub fn run_sweep(base: &RunConfig, out: &Path, key: &str, values: &[String]) -> Result<PathBuf> {
    let _lock = RunLock::acquire(out)?;
    let configs = values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.set(key, v)?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = format!("{key},config_hash,valid_metric,test_metric\n");
    for (v, cfg) in values.iter().zip(configs) {
        let mut p = Pipeline::new(cfg, out.join("sweep").join(format!("{key}={v}")))?;
        if std::env::var_os("GAGA_CACHE_DIR").is_none() {
            p.cache_dir = out.join("cache");
        }
        p.run(Stage::Pipeline)?;
        let report = p.report()?;
        let (valid, test) = headline(&report);
        let fmt = |m: Option<f64>| m.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{v},{},{},{}", report.config_hash, fmt(valid), fmt(test));
    }
    let path = out.join(format!("sweep_{key}.csv"));
    fs::write(&path, csv)?;
    Ok(path)
}
