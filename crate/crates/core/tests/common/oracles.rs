//! Brute-force reference implementations and randomized comparisons against
//! the library. Values are drawn from coarse grids so ties actually occur.

use std::collections::BTreeSet;

use gaga_core::aligner::vq_map;
use gaga_core::annograph::build_annotation_graph;
use gaga_core::downstream::{auc, link_metrics, mrr_at_10, pessimistic_rank, random_mrr_at_10};
use gaga_core::graph::EmbeddingTable;
use gaga_core::providers::AnnotationRecord;
use gaga_core::selector::{kmeans, select_edges, select_nodes, Target, TargetKind};
use gaga_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64, label: &str) -> ChaCha8Rng {
    gaga_core::seed::rng(seed, label)
}

/// Multiples of 0.5 in [-2, 2].
fn grid(g: &mut impl Rng) -> f32 {
    g.random_range(-4i32..=4) as f32 * 0.5
}

fn rows(g: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    let mut out: Vec<Vec<f32>> = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 && g.random::<f64>() < 0.15 {
            let j = g.random_range(0..i);
            out.push(out[j].clone());
        } else {
            out.push((0..d).map(|_| grid(g)).collect());
        }
    }
    out
}

fn nonzero_rows(g: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    let mut out = rows(g, n, d);
    for r in &mut out {
        if r.iter().all(|v| *v == 0.0) {
            r[0] = 1.0;
        }
    }
    out
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        let d = a[k] as f64 - b[k];
        s += d * d;
    }
    s
}

/// Outcome of one oracle family.
#[derive(Debug, Default)]
pub struct Tally {
    pub instances: usize,
    pub failures: Vec<String>,
    /// Largest absolute inertia discrepancy (k-means only).
    pub worst: f64,
}

impl Tally {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok && self.failures.len() < 5 {
            self.failures.push(what());
        }
    }

    pub fn ok(&self) -> bool {
        self.instances > 0 && self.failures.is_empty()
    }
}

pub const INERTIA_TOL: f64 = 1e-5;

/// Nearest-center assignment, inertia and top-s density selection against
/// brute force over the returned centers; converged clusterings must also
/// sit at the means of their members.
pub fn kmeans_selection(instances: u64) -> Tally {
    let mut t = Tally::default();
    for seed in 0..instances {
        let mut g = rng(seed, "oracle/kmeans");
        let d = g.random_range(1..=4);
        let n = g.random_range(2..=(500 / d).min(80));
        let pts = rows(&mut g, n, d);
        let emb = EmbeddingTable::from_rows(&pts, "oracle").unwrap();
        let k = g.random_range(1..=n.min(6));
        let max_iter = 100;
        let cl = kmeans(&emb, k, max_iter, seed).unwrap();
        t.instances += 1;

        let mut inertia = 0.0;
        for (i, p) in pts.iter().enumerate() {
            let mut best = 0;
            for c in 1..k {
                if sq_dist(p, &cl.centers[c]) < sq_dist(p, &cl.centers[best]) {
                    best = c;
                }
            }
            inertia += sq_dist(p, &cl.centers[best]);
            t.check(cl.assignment[i] == best, || format!("seed {seed}: point {i} assigned {} not {best}", cl.assignment[i]));
        }
        let err = (inertia - cl.inertia).abs();
        t.worst = t.worst.max(err);
        t.check(err <= INERTIA_TOL, || format!("seed {seed}: inertia {} vs {inertia}", cl.inertia));

        if cl.inertia_trace.len() <= max_iter {
            for c in 0..k {
                let members: Vec<&Vec<f32>> = (0..n).filter(|&i| cl.assignment[i] == c).map(|i| &pts[i]).collect();
                if members.is_empty() {
                    continue;
                }
                for j in 0..d {
                    let mean = members.iter().map(|p| p[j] as f64).sum::<f64>() / members.len() as f64;
                    t.check((mean - cl.centers[c][j]).abs() < 1e-9, || format!("seed {seed}: center {c} is not its members' mean"));
                }
            }
        }

        let scores: Vec<f64> = (0..n)
            .map(|i| 1.0 / (1.0 + sq_dist(&pts[i], &cl.centers[cl.assignment[i]]).sqrt()))
            .collect();
        let s = g.random_range(1..=n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let expect: Vec<Target> = order[..s].iter().map(|&v| Target::Node(v)).collect();
        let got = select_nodes(&emb, &cl, s);
        t.check(got.targets() == expect, || format!("seed {seed}: top-{s} {:?} vs {expect:?}", got.targets()));
        for item in &got.items {
            if let Target::Node(v) = item.target {
                t.check(item.score == scores[v], || format!("seed {seed}: node {v} score {} vs {}", item.score, scores[v]));
            }
        }
    }
    t
}

/// Canonical dedup, endpoint-sum scores and top-budget order.
pub fn edge_selection(instances: u64) -> Tally {
    let mut t = Tally::default();
    for seed in 0..instances {
        let mut g = rng(seed, "oracle/edges");
        let n = g.random_range(2..=30);
        let scores: Vec<f64> = (0..n).map(|_| g.random_range(0..8) as f64 * 0.125).collect();
        let m = g.random_range(1..=120);
        let edges: Vec<(usize, usize)> = (0..m)
            .map(|_| {
                let u = g.random_range(0..n);
                let mut v = g.random_range(0..n - 1);
                if v >= u {
                    v += 1;
                }
                (u, v)
            })
            .collect();
        let uniq: BTreeSet<(usize, usize)> = edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
        let mut ranked: Vec<((usize, usize), f64)> = uniq.iter().map(|&(u, v)| ((u, v), scores[u] + scores[v])).collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let budget = g.random_range(1..=uniq.len() + 2);
        ranked.truncate(budget);
        let got = select_edges(&edges, &scores, budget).unwrap();
        t.instances += 1;
        let got_pairs: Vec<((usize, usize), f64)> = got
            .items
            .iter()
            .map(|s| match s.target {
                Target::Edge(u, v) => ((u, v), s.score),
                Target::Node(_) => ((usize::MAX, usize::MAX), s.score),
            })
            .collect();
        t.check(got_pairs == ranked, || format!("seed {seed}: {got_pairs:?} vs {ranked:?}"));
    }
    t
}

fn record(i: usize) -> AnnotationRecord {
    AnnotationRecord {
        kind: TargetKind::Node,
        ids: vec![i],
        template_id: "generic".into(),
        prompt_hash: String::new(),
        annotation_text: format!("annotation {i}"),
        provider_id: "oracle".into(),
        created_at: String::new(),
    }
}

/// Symmetrized union of every node's `k'` most cosine-similar peers.
pub fn knn_graph(instances: u64) -> Tally {
    let mut t = Tally::default();
    for seed in 0..instances {
        let mut g = rng(seed, "oracle/knn");
        let d = g.random_range(1..=4);
        let n = g.random_range(2..=(500 / d).min(40));
        let pts = nonzero_rows(&mut g, n, d);
        let k = g.random_range(1..n);
        let emb = EmbeddingTable::from_rows(&pts, "oracle").unwrap();
        let graph = build_annotation_graph((0..n).map(record).collect(), emb, k).unwrap();
        t.instances += 1;

        let cos = |a: &[f32], b: &[f32]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
            let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum();
            let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum();
            (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
        };
        let mut expect = BTreeSet::new();
        for i in 0..n {
            let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (cos(&pts[i], &pts[j]), j)).collect();
            others.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for &(_, j) in &others[..k] {
                expect.insert((i.min(j), i.max(j)));
            }
        }
        let got: BTreeSet<(usize, usize)> = graph.graph.edges().into_iter().collect();
        t.check(graph.num_nodes() == n, || format!("seed {seed}: {} nodes", graph.num_nodes()));
        t.check(got.iter().all(|(u, v)| u != v), || format!("seed {seed}: self-edge"));
        t.check(got == expect, || format!("seed {seed}: edges {got:?} vs {expect:?}"));
    }
    t
}

/// Nearest prototype, ties to the lower index.
pub fn vq(instances: u64) -> Tally {
    let mut t = Tally::default();
    for seed in 0..instances {
        let mut g = rng(seed, "oracle/vq");
        let d = g.random_range(1..=5);
        let kp = g.random_range(1..=(500 / d).min(40));
        let protos = rows(&mut g, kp, d);
        let tensor = Tensor::matrix(kp, d, protos.iter().flatten().cloned().collect()).unwrap();
        for _ in 0..10 {
            let row: Vec<f32> = if g.random::<bool>() {
                protos[g.random_range(0..kp)].clone()
            } else {
                (0..d).map(|_| grid(&mut g) * 0.5).collect()
            };
            let row64: Vec<f64> = row.iter().map(|v| *v as f64).collect();
            let dists: Vec<f64> = protos
                .iter()
                .map(|p| p.iter().zip(&row64).map(|(a, b)| (*a as f64 - b).powi(2)).sum())
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let expect = dists.iter().position(|&x| x == min).unwrap();
            let got = vq_map(&row, &tensor).unwrap();
            t.instances += 1;
            t.check(got == expect, || format!("seed {seed}: vq {got} vs {expect}"));
        }
    }
    t
}

/// Pessimistic rank and MRR@10 from explicit counting, on score lists with
/// ties; the random baseline against exhaustive placement of the positive.
pub fn mrr(instances: u64) -> Tally {
    let mut t = Tally::default();
    for seed in 0..instances {
        let mut g = rng(seed, "oracle/mrr");
        let p = g.random_range(1..=10);
        let k = g.random_range(1..=45);
        let pos: Vec<f64> = (0..p).map(|_| g.random_range(0..6) as f64).collect();
        let negs: Vec<Vec<f64>> = (0..p).map(|_| (0..k).map(|_| g.random_range(0..6) as f64).collect()).collect();
        let mut total = 0.0;
        for (i, &s) in pos.iter().enumerate() {
            let mut rank = 1;
            for &x in &negs[i] {
                if x >= s {
                    rank += 1;
                }
            }
            t.check(pessimistic_rank(s, &negs[i]) == rank, || format!("seed {seed}: rank"));
            if rank <= 10 {
                total += 1.0 / rank as f64;
            }
        }
        let expect = total / p as f64;
        let ranks: Vec<usize> = pos.iter().zip(&negs).map(|(s, n)| pessimistic_rank(*s, n)).collect();
        let got = mrr_at_10(&ranks).unwrap();
        let (via_link, _) = link_metrics(&pos, &negs).unwrap();
        t.instances += 1;
        t.check(got == expect && via_link == expect, || format!("seed {seed}: mrr {got} / {via_link} vs {expect}"));

        let kk = g.random_range(1..=200);
        let negatives: Vec<f64> = (0..kk).map(|x| x as f64).collect();
        let placed: Vec<usize> = (0..=kk).map(|slot| pessimistic_rank(kk as f64 - slot as f64 - 0.5, &negatives)).collect();
        let exhaustive = mrr_at_10(&placed).unwrap();
        t.check((random_mrr_at_10(kk) - exhaustive).abs() < 1e-12, || {
            format!("seed {seed}: random baseline K={kk} {} vs {exhaustive}", random_mrr_at_10(kk))
        });
    }
    t
}

/// AUC from all (positive, negative) pairs, ties worth one half, compared
/// as an exact rational.
pub fn auc_pairs(instances: u64) -> Tally {
    let mut t = Tally::default();
    for seed in 0..instances {
        let mut g = rng(seed, "oracle/auc");
        let p = g.random_range(1..=250);
        let n = g.random_range(1..=250);
        let pos: Vec<f64> = (0..p).map(|_| g.random_range(0..10) as f64 * 0.1).collect();
        let neg: Vec<f64> = (0..n).map(|_| g.random_range(0..10) as f64 * 0.1).collect();
        let mut half_credits = 0u64;
        for a in &pos {
            for b in &neg {
                half_credits += if a > b {
                    2
                } else if a == b {
                    1
                } else {
                    0
                };
            }
        }
        let expect = half_credits as f64 / (2 * p * n) as f64;
        let got = auc(&pos, &neg).unwrap();
        t.instances += 1;
        t.check(got == expect, || format!("seed {seed}: auc {got} vs {expect}"));
    }
    t
}

/// Recomputes MRR@10 and AUC for one set of link scores with the brute-force
/// counting above.
pub fn link_metrics_oracle(pos: &[f64], negs: &[Vec<f64>]) -> (f64, f64) {
    let mut total = 0.0;
    let mut half_credits = 0u64;
    let mut pairs = 0u64;
    for (s, list) in pos.iter().zip(negs) {
        let rank = 1 + list.iter().filter(|x| *x >= s).count();
        if rank <= 10 {
            total += 1.0 / rank as f64;
        }
    }
    for s in pos {
        for x in negs.iter().flatten() {
            half_credits += if s > x {
                2
            } else if s == x {
                1
            } else {
                0
            };
            pairs += 1;
        }
    }
    (total / pos.len() as f64, half_credits as f64 / (2 * pairs) as f64)
}

/// Every oracle family; `scale` multiplies the instance counts.
pub fn all(scale: u64) -> Vec<(&'static str, Tally)> {
    vec![
        ("k-means assignment/inertia/top-s", kmeans_selection(60 * scale)),
        ("edge selection", edge_selection(100 * scale)),
        ("knn annotation graph", knn_graph(60 * scale)),
        ("vq_map", vq(30 * scale)),
        ("mrr@10", mrr(100 * scale)),
        ("auc", auc_pairs(100 * scale)),
    ]
}
