use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::prompt::{target_fields, PromptTemplate};
use super::{content_hash, with_retries, AnnotationRecord, AnnotationRequest, Annotator, ProviderError, Result, RetryPolicy};
use crate::graph::{NodeId, Tag};
use crate::selector::{SelectionResult, TargetKind};

/// Append-only JSONL store of records keyed by `(prompt_hash, provider_id)`.
#[derive(Clone, Debug)]
pub struct AnnotationCache {
    path: PathBuf,
}

impl AnnotationCache {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    /// `annotations.jsonl` under `GAGA_CACHE_DIR`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os("GAGA_CACHE_DIR").map(|d| Self::new(Path::new(&d).join("annotations.jsonl")))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn snapshot(&self) -> Result<BTreeMap<(String, String), AnnotationRecord>> {
        let mut map = BTreeMap::new();
        if !self.path.exists() {
            return Ok(map);
        }
        for line in std::fs::read_to_string(&self.path)?.lines().filter(|l| !l.trim().is_empty()) {
            let r: AnnotationRecord = serde_json::from_str(line)?;
            map.entry((r.prompt_hash.clone(), r.provider_id.clone())).or_insert(r);
        }
        Ok(map)
    }

    pub fn append(&self, records: &[AnnotationRecord]) -> Result<()> {
        if records.is_empty() {
            return Ok(());
        }
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut buf = String::new();
        for r in records {
            buf.push_str(&serde_json::to_string(r)?);
            buf.push('\n');
        }
        f.write_all(buf.as_bytes())?;
        Ok(())
    }
}

/// Source of `created_at` timestamps.
#[derive(Clone, Copy, Debug)]
pub enum Clock {
    System,
    Fixed(DateTime<Utc>),
}

impl Clock {
    fn now(&self) -> String {
        let t = match self {
            Clock::System => Utc::now(),
            Clock::Fixed(t) => *t,
        };
        t.to_rfc3339_opts(SecondsFormat::Secs, true)
    }
}

/// USD per thousand estimated tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pricing {
    pub prompt_per_1k: f64,
    pub completion_per_1k: f64,
}

/// Estimated token usage of fresh remote calls, at ⌈chars/4⌉ per text.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub remote_calls: usize,
    pub cache_hits: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost_usd: f64,
}

pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub kind: TargetKind,
    pub ids: Vec<NodeId>,
    pub prompt_hash: String,
    pub error: String,
}

#[derive(Clone, Debug)]
pub struct AnnotateOptions {
    pub retry: RetryPolicy,
    pub parallelism: usize,
    pub cache: Option<AnnotationCache>,
    pub clock: Clock,
    pub pricing: Pricing,
    /// Value of the `{categories}` placeholder.
    pub categories: String,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            parallelism: 4,
            cache: None,
            clock: Clock::System,
            pricing: Pricing::default(),
            categories: String::new(),
        }
    }
}

/// Completed records in selection order plus the targets that failed.
#[derive(Clone, Debug)]
pub struct AnnotateOutcome {
    pub records: Vec<AnnotationRecord>,
    pub failures: Vec<Failure>,
    pub cost: CostLedger,
}

struct Job {
    kind: TargetKind,
    ids: Vec<NodeId>,
    prompt: String,
    prompt_hash: String,
}

/// Annotates every selected target. Cached records are returned unchanged;
/// the rest go to the annotator with bounded parallelism and retries, and
/// fresh successes are appended to the cache.
pub fn annotate(
    tag: &Tag,
    selection: &SelectionResult,
    template: &PromptTemplate,
    annotator: &dyn Annotator,
    opts: &AnnotateOptions,
) -> Result<AnnotateOutcome> {
    if selection.is_empty() {
        return Err(ProviderError::Config("nothing selected to annotate".into()));
    }
    let provider_id = annotator.provider_id();
    let jobs: Vec<Job> = selection
        .targets()
        .into_iter()
        .map(|t| {
            let prompt = template.render(&target_fields(tag, t, &opts.categories))?;
            Ok(Job {
                kind: t.kind(),
                ids: t.ids(),
                prompt_hash: content_hash(&prompt),
                prompt,
            })
        })
        .collect::<Result<_>>()?;

    let cached = match &opts.cache {
        Some(c) => c.snapshot()?,
        None => BTreeMap::new(),
    };
    let mut slots: Vec<Option<std::result::Result<AnnotationRecord, String>>> = jobs
        .iter()
        .map(|j| {
            cached
                .get(&(j.prompt_hash.clone(), provider_id.clone()))
                .filter(|r| r.kind == j.kind && r.ids == j.ids)
                .cloned()
                .map(Ok)
        })
        .collect();
    let pending: Vec<usize> = (0..jobs.len()).filter(|&i| slots[i].is_none()).collect();
    let mut cost = CostLedger {
        cache_hits: jobs.len() - pending.len(),
        ..CostLedger::default()
    };

    let calls = AtomicUsize::new(0);
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(pending.len()));
    std::thread::scope(|s| {
        for _ in 0..opts.parallelism.max(1).min(pending.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = pending.get(k) else { break };
                let job = &jobs[i];
                let texts: Vec<&str> = job.ids.iter().map(|&v| tag.text(v)).collect();
                let labels = job.ids.iter().map(|&v| tag.label(v)).collect();
                let request = AnnotationRequest {
                    target: selection.items[i].target,
                    prompt: &job.prompt,
                    texts,
                    labels,
                };
                let out = with_retries(&opts.retry, || {
                    calls.fetch_add(1, Ordering::SeqCst);
                    let text = annotator.complete(&request)?;
                    if text.trim().is_empty() {
                        return Err(ProviderError::Malformed("empty completion".into()));
                    }
                    Ok(text)
                });
                results.lock().expect("worker panicked").push((i, out.map_err(|e| e.to_string())));
            });
        }
    });

    let mut fresh = Vec::new();
    for (i, out) in results.into_inner().expect("worker panicked") {
        let job = &jobs[i];
        slots[i] = Some(out.map(|text| {
            cost.prompt_tokens += estimate_tokens(&job.prompt);
            cost.completion_tokens += estimate_tokens(&text);
            AnnotationRecord {
                kind: job.kind,
                ids: job.ids.clone(),
                template_id: template.id.clone(),
                prompt_hash: job.prompt_hash.clone(),
                annotation_text: text,
                provider_id: provider_id.clone(),
                created_at: opts.clock.now(),
            }
        }));
    }
    cost.remote_calls = calls.into_inner();
    cost.cost_usd = cost.prompt_tokens as f64 / 1000.0 * opts.pricing.prompt_per_1k
        + cost.completion_tokens as f64 / 1000.0 * opts.pricing.completion_per_1k;

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (i, slot) in slots.into_iter().enumerate() {
        match slot.expect("every job resolved") {
            Ok(r) => {
                if pending.binary_search(&i).is_ok() {
                    fresh.push(r.clone());
                }
                records.push(r);
            }
            Err(error) => failures.push(Failure {
                kind: jobs[i].kind,
                ids: jobs[i].ids.clone(),
                prompt_hash: jobs[i].prompt_hash.clone(),
                error,
            }),
        }
    }
    if let Some(c) = &opts.cache {
        c.append(&fresh)?;
    }
    if !failures.is_empty() {
        log::warn!("{} of {} annotations failed", failures.len(), jobs.len());
    }
    Ok(AnnotateOutcome { records, failures, cost })
}
