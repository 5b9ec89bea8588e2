//! The acceptance experiments. Each returns a verdict plus a one-line summary
//! of what it measured.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gaga_core::aligner::{loss_combined, loss_eq1};
use gaga_core::config::RunConfig;
use gaga_core::downstream::{link_scores, random_mrr_at_10, Model, Task};
use gaga_core::pipeline::{headline, run_sweep, Gauge, Pipeline, Stage, GAUGES_FILE, MODEL_DIR, REPORT_FILE};
use gaga_core::providers::PromptTemplate;
use gaga_core::selector::density_score;
use gaga_core::tensor::{Tape, Tensor};

use super::{grads, oracles};

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn node_config() -> RunConfig {
    RunConfig::load(&configs_dir().join("synth_node.toml")).expect("bundled node config")
}

pub fn link_config() -> RunConfig {
    RunConfig::load(&configs_dir().join("synth_link.toml")).expect("bundled link config")
}

pub fn run(config: RunConfig, out: &Path) -> Pipeline {
    let p = Pipeline::new(config, out).expect("valid config");
    p.run(Stage::Pipeline).expect("pipeline run");
    p
}

fn test_metric(p: &Pipeline) -> f64 {
    headline(&p.report().unwrap()).1.unwrap()
}

pub const OP_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

pub fn gradients() -> Verdict {
    let start = Instant::now();
    let ops = grads::op_suite(5);
    let mut e2e = 0.0f64;
    let mut e2e_n = 0;
    for seed in 0..6 {
        for alpha in [0.0, 0.6, 1.0] {
            let (fd, st) = grads::align_loss_check(seed, alpha);
            e2e = e2e.max(fd).max(st);
            e2e_n += 1;
        }
        for residual in [false, true] {
            e2e = e2e.max(grads::finetune_node_check(seed, residual));
            e2e_n += 1;
        }
        e2e = e2e.max(grads::finetune_link_check(seed));
        e2e_n += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    let instances = ops.instances + e2e_n;
    Verdict::new(
        ops.worst < OP_TOL && e2e < END_TO_END_TOL && instances >= 100 && secs < 60.0,
        format!(
            "{instances} instances, op worst {:.2e} ({}), end-to-end worst {e2e:.2e}, {secs:.1}s",
            ops.worst, ops.worst_case
        ),
    )
}

pub fn oracle_suite() -> Verdict {
    let start = Instant::now();
    let tallies = oracles::all(1);
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = tallies
        .iter()
        .filter(|(_, t)| !t.ok())
        .map(|(name, t)| format!("{name}: {:?}", t.failures))
        .collect();
    let n: usize = tallies.iter().map(|(_, t)| t.instances).sum();
    let inertia = tallies.iter().map(|(_, t)| t.worst).fold(0.0, f64::max);
    Verdict::new(
        failed.is_empty() && secs < 120.0,
        if failed.is_empty() {
            format!("{n} instances over {} families, worst inertia error {inertia:.1e}, {secs:.1}s", tallies.len())
        } else {
            failed.join("; ")
        },
    )
}

fn eq1(ht: &[f64], ha: &[f64], d: usize) -> f64 {
    let mut t = Tape::new();
    let a = t.constant(Tensor::matrix(ht.len() / d, d, ht.to_vec()).unwrap());
    let b = t.constant(Tensor::matrix(ha.len() / d, d, ha.to_vec()).unwrap());
    let l = loss_eq1(&mut t, a, b).unwrap();
    t.value(l).data()[0]
}

fn combined(ht: &[f64], ha: &[f64], z: &[f64], alpha: f64) -> f64 {
    let mut t = Tape::new();
    let n = ht.len();
    let a = t.constant(Tensor::matrix(n, 1, ht.to_vec()).unwrap());
    let b = t.constant(Tensor::matrix(n, 1, ha.to_vec()).unwrap());
    let c = t.constant(Tensor::matrix(n, 1, z.to_vec()).unwrap());
    let l = loss_combined(&mut t, a, b, c, alpha).unwrap();
    t.value(l).data()[0]
}

pub fn formula_fixtures() -> Verdict {
    // (value, expected, tolerance)
    let cases = [
        ("eq1 matched (0),(1)", eq1(&[0.0, 1.0], &[0.0, 1.0], 1), -2.0, 1e-6),
        ("eq1 swapped (0),(1)", eq1(&[0.0, 1.0], &[1.0, 0.0], 1), 2.0, 1e-6),
        ("eq1 identical rows", eq1(&[0.5; 6], &[0.5; 6], 2), 0.0, 1e-6),
        // t=(0,1,2), a=t: matched 0, each row's mismatched mean is (1+4)/2, (1+1)/2, (4+1)/2
        ("eq1 three points on a line", eq1(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0], 1), -6.0, 1e-6),
        ("combined alpha=0", combined(&[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0], 0.0), -2.0, 1e-6),
        ("combined alpha=1", combined(&[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0], 1.0), 2.0, 1e-6),
        ("combined alpha=0.5", combined(&[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0], 0.5), 0.0, 1e-6),
        ("combined alpha=0.6", combined(&[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0], 0.6), 0.4, 1e-6),
        ("density (3,4) vs origin", density_score(&[3.0, 4.0], &[0.0, 0.0]), 1.0 / 6.0, 1e-9),
    ];
    let bad: Vec<String> = cases
        .iter()
        .filter(|(_, v, e, tol)| (v - e).abs() > *tol)
        .map(|(name, v, e, _)| format!("{name}: {v} vs {e}"))
        .collect();
    Verdict::new(
        bad.is_empty(),
        if bad.is_empty() { format!("{} fixtures", cases.len()) } else { bad.join("; ") },
    )
}

pub fn prompt_fields() -> BTreeMap<String, String> {
    [
        ("title", "Routing Messages on Sparse Graphs"),
        ("abstract", "We route {messages} along $k$ short paths; costs drop 40%."),
        ("text", "Stainless steel kettle, 1.7 L, auto shut-off."),
        ("categories", "alpha, beta, gamma"),
        ("title1", "Paper One"),
        ("abstract1", "First abstract."),
        ("title2", "Paper Two"),
        ("abstract2", "Second abstract."),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

pub const DATASET_TEMPLATES: [&str; 6] = ["arxiv", "arxiv23", "cora", "pubmed", "products", "link"];

pub fn prompt_fidelity() -> Verdict {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/prompts");
    let mut bad = Vec::new();
    let mut rendered = BTreeMap::new();
    for id in DATASET_TEMPLATES {
        let golden = fs::read(dir.join(format!("{id}.txt"))).unwrap_or_default();
        let out = PromptTemplate::builtin(id).and_then(|t| t.render(&prompt_fields()));
        match out {
            Ok(s) if s.as_bytes() == golden.as_slice() => {
                rendered.insert(id, s);
            }
            _ => bad.push(id.to_string()),
        }
    }
    let phrases = rendered.get("arxiv").is_some_and(|s| s.contains("Give 5 likely arXiv CS sub-categories"))
        && rendered.get("link").is_some_and(|s| s.contains("Why are these two papers related?"));
    Verdict::new(
        bad.is_empty() && phrases,
        if bad.is_empty() {
            format!("{} templates byte-identical, key phrases present: {phrases}", DATASET_TEMPLATES.len())
        } else {
            format!("mismatched: {}", bad.join(", "))
        },
    )
}

pub const SEEDS: u64 = 5;

pub fn alignment_benefit(work: &Path) -> Verdict {
    let start = Instant::now();
    let base = node_config();
    let (mut aligned, mut baseline) = (Vec::new(), Vec::new());
    for seed in 0..SEEDS {
        let cfg = RunConfig { seed, ..base.clone() };
        aligned.push(test_metric(&run(cfg.clone(), &work.join(format!("aligned-{seed}")))));
        let random_init = RunConfig { align_epochs: 0, ..cfg };
        baseline.push(test_metric(&run(random_init, &work.join(format!("baseline-{seed}")))));
    }
    let secs = start.elapsed().as_secs_f64();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let paired: Vec<f64> = aligned.iter().zip(&baseline).map(|(a, b)| a - b).collect();
    let gain = mean(&paired);
    Verdict::new(
        mean(&aligned) > mean(&baseline) && gain >= 0.03 && secs < 600.0,
        format!(
            "test accuracy aligned {:.3} vs baseline {:.3}, paired gain {:+.1} points, {secs:.0}s",
            mean(&aligned),
            mean(&baseline),
            gain * 100.0
        ),
    )
}

pub const ALPHAS: [&str; 3] = ["0", "0.6", "1.0"];

/// Runs the α sweep per seed and writes `alpha_sweep.csv` in `work` with
/// every (seed, α) row.
pub fn alpha_endpoints(work: &Path) -> Verdict {
    let alphas: Vec<String> = ALPHAS.iter().map(|s| s.to_string()).collect();
    let mut sums = [0f64; 3];
    let mut csv = String::from("seed,alpha,valid_accuracy,test_accuracy\n");
    for seed in 0..SEEDS {
        let dir = work.join(format!("seed-{seed}"));
        let path = run_sweep(&RunConfig { seed, ..node_config() }, &dir, "alpha", &alphas).expect("sweep");
        let text = fs::read_to_string(path).unwrap();
        for (i, line) in text.lines().skip(1).enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            sums[i] += cols[2].parse::<f64>().unwrap();
            csv.push_str(&format!("{seed},{},{},{}\n", cols[0], cols[2], cols[3]));
        }
    }
    fs::write(work.join("alpha_sweep.csv"), &csv).unwrap();
    let m: Vec<f64> = sums.iter().map(|s| s / SEEDS as f64).collect();
    Verdict::new(
        m[1] >= m[0] && m[1] >= m[2],
        format!("mean valid accuracy α=0 {:.3}, α=0.6 {:.3}, α=1 {:.3}", m[0], m[1], m[2]),
    )
}

fn finetune_seconds(p: &Pipeline) -> f64 {
    let g: BTreeMap<String, Gauge> = serde_json::from_str(&fs::read_to_string(p.out.join(GAUGES_FILE)).unwrap()).unwrap();
    g["finetune"].seconds
}

pub fn kp_cost(work: &Path) -> Verdict {
    let small = run(RunConfig { k_p: 8, ..node_config() }, &work.join("kp-8"));
    let large = run(RunConfig { k_p: 512, ..node_config() }, &work.join("kp-512"));
    let (ts, tl) = (finetune_seconds(&small), finetune_seconds(&large));
    let (as_, al) = (test_metric(&small), test_metric(&large));
    Verdict::new(
        tl > ts && (as_ - al).abs() < 0.05,
        format!(
            "fine-tune {ts:.2}s at k_p=8 vs {tl:.2}s at k_p=512, test accuracy {as_:.3} vs {al:.3}"
        ),
    )
}

/// Relative path → bytes for every file under `dir`.
pub fn tree_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub fn determinism(work: &Path) -> Verdict {
    let a = run(node_config(), &work.join("a"));
    let b = run(node_config(), &work.join("b"));
    let mut differing = Vec::new();
    let report_same = fs::read(a.out.join(REPORT_FILE)).unwrap() == fs::read(b.out.join(REPORT_FILE)).unwrap();
    if !report_same {
        differing.push(REPORT_FILE.to_string());
    }
    for dir in [MODEL_DIR, gaga_core::pipeline::ALIGN_DIR] {
        let (ta, tb) = (tree_bytes(&a.out.join(dir)), tree_bytes(&b.out.join(dir)));
        if ta.is_empty() || ta != tb {
            differing.push(dir.to_string());
        }
    }
    Verdict::new(
        differing.is_empty(),
        if differing.is_empty() {
            "eval report, alignment and model checkpoints byte-identical".into()
        } else {
            format!("differ: {}", differing.join(", "))
        },
    )
}

pub fn link_sanity(work: &Path) -> Verdict {
    let cfg = link_config();
    let negatives = cfg.link_negatives;
    let p = run(cfg, &work.join("link"));
    let report = p.report().unwrap();
    assert_eq!(report.task, Task::Link);
    let test = &report.splits["test"];
    let (mrr, auc) = (test.mrr_at_10.unwrap(), test.auc.unwrap());
    let random = random_mrr_at_10(negatives);

    let (model, _) = Model::load(&p.out.join(MODEL_DIR)).unwrap();
    let scores = link_scores(&model, &p.load_split().unwrap(), &p.load_text_emb().unwrap()).unwrap();
    let mut reverified = true;
    for (name, (pos, negs)) in &scores {
        let (om, oa) = oracles::link_metrics_oracle(pos, negs);
        let m = &report.splits[name];
        reverified &= m.mrr_at_10 == Some(om) && m.auc == Some(oa);
    }
    Verdict::new(
        auc >= 0.85 && mrr >= 3.0 * random && reverified,
        format!(
            "test AUC {auc:.3}, MRR@10 {mrr:.3} vs 3×random {:.3} (K={negatives}), oracle re-check {}",
            3.0 * random,
            if reverified { "agrees" } else { "DISAGREES" }
        ),
    )
}
