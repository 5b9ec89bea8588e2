use std::sync::Arc;

use gaga_core::aligner::{gcn_forward, loss_combined, GcnConfig, GcnEncoder};
use gaga_core::downstream::{FusionConfig, Model};
use gaga_core::tensor::{grad_check_many, relative_error, Result, SparseMatrix, Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;

fn te(e: impl std::fmt::Display) -> TensorError {
    TensorError::Contract(e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    gaga_core::seed::rng(seed, "gradient-suite")
}

/// Entries in ±[0.1, 1.1], so nothing sits on a ReLU kink.
fn rand_t(rng: &mut impl Rng, r: usize, c: usize) -> Tensor<f64> {
    let data = (0..r * c)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.1);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(r, c, data).unwrap()
}

fn rand_adj(rng: &mut impl Rng, n: usize) -> Arc<SparseMatrix<f64>> {
    let mut entries = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j || rng.random::<f64>() < 0.4 {
                entries.push((i, j, rng.random_range(0.1..1.0)));
            }
        }
    }
    Arc::new(SparseMatrix::from_triplets(n, n, entries).unwrap())
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry gets a distinct
/// upstream gradient.
fn project(t: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = t.value(out).shape().to_vec();
    let (r, c) = (t.value(out).rows(), t.value(out).cols());
    let w = rand_t(&mut rng(seed ^ 0xabc), r, c);
    let w = t.constant(Tensor::new(shape, w.into_data())?);
    let p = t.mul(out, w)?;
    t.sum(p)
}

type OpCase = (&'static str, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>, Vec<Tensor<f64>>);

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut g = rng(seed);
    let (m, k, n) = (g.random_range(1..5), g.random_range(1..5), g.random_range(1..5));
    let adj = rand_adj(&mut g, m);
    let idx: Vec<usize> = (0..g.random_range(1..6)).map(|_| g.random_range(0..m)).collect();
    let classes: Vec<usize> = (0..m).map(|_| g.random_range(0..n)).collect();
    let bits: Vec<f64> = (0..m * n).map(|_| if g.random::<bool>() { 1.0 } else { 0.0 }).collect();
    let s = g.random_range(-2.0..2.0);
    let a = rand_t(&mut g, m, k);
    let b = rand_t(&mut g, k, n);
    let c = rand_t(&mut g, m, k);
    let row = rand_t(&mut g, 1, k);
    let p = rand_t(&mut g, n, k);
    let logits = rand_t(&mut g, m, n);
    let sd = seed;
    vec![
        ("matmul", Box::new(move |t, v| { let o = t.matmul(v[0], v[1])?; project(t, o, sd) }), vec![a.clone(), b.clone()]),
        ("spmm", Box::new(move |t, v| { let o = t.spmm(adj.clone(), v[0])?; project(t, o, sd) }), vec![a.clone()]),
        ("add", Box::new(move |t, v| { let o = t.add(v[0], v[1])?; project(t, o, sd) }), vec![a.clone(), c.clone()]),
        ("sub", Box::new(move |t, v| { let o = t.sub(v[0], v[1])?; project(t, o, sd) }), vec![a.clone(), c.clone()]),
        ("mul", Box::new(move |t, v| { let o = t.mul(v[0], v[1])?; project(t, o, sd) }), vec![a.clone(), c.clone()]),
        ("add_row", Box::new(move |t, v| { let o = t.add_row(v[0], v[1])?; project(t, o, sd) }), vec![a.clone(), row.clone()]),
        ("scale", Box::new(move |t, v| { let o = t.scale(v[0], s)?; project(t, o, sd) }), vec![a.clone()]),
        ("add_scalar", Box::new(move |t, v| { let o = t.add_scalar(v[0], s)?; project(t, o, sd) }), vec![a.clone()]),
        ("relu", Box::new(move |t, v| { let o = t.relu(v[0])?; project(t, o, sd) }), vec![a.clone()]),
        ("sigmoid", Box::new(move |t, v| { let o = t.sigmoid(v[0])?; project(t, o, sd) }), vec![a.clone()]),
        ("transpose", Box::new(move |t, v| { let o = t.transpose(v[0])?; project(t, o, sd) }), vec![a.clone()]),
        ("softmax_rows", Box::new(move |t, v| { let o = t.softmax_rows(v[0])?; project(t, o, sd) }), vec![a.clone()]),
        ("sum", Box::new(move |t, v| t.sum(v[0])), vec![a.clone()]),
        ("mean_rows", Box::new(move |t, v| { let o = t.mean_rows(v[0])?; project(t, o, sd) }), vec![a.clone()]),
        ("row_sum", Box::new(move |t, v| { let o = t.row_sum(v[0])?; project(t, o, sd) }), vec![a.clone()]),
        ("sq_norm_rows", Box::new(move |t, v| { let o = t.sq_norm_rows(v[0])?; project(t, o, sd) }), vec![a.clone()]),
        ("l2_normalize_rows", Box::new(move |t, v| { let o = t.l2_normalize_rows(v[0])?; project(t, o, sd) }), vec![a.clone()]),
        ("gather_rows", Box::new(move |t, v| { let o = t.gather_rows(v[0], &idx)?; project(t, o, sd) }), vec![a.clone()]),
        ("concat_rows", Box::new(move |t, v| { let o = t.concat_rows(&[v[0], v[1]])?; project(t, o, sd) }), vec![a.clone(), c.clone()]),
        ("pairwise_sq_dist", Box::new(move |t, v| { let o = t.pairwise_sq_dist(v[0], v[1])?; project(t, o, sd) }), vec![a.clone(), p.clone()]),
        ("cross_entropy", Box::new(move |t, v| t.cross_entropy(v[0], &classes)), vec![logits.clone()]),
        ("bce_with_logits", Box::new(move |t, v| t.bce_with_logits(v[0], &bits)), vec![logits.clone()]),
    ]
}

pub struct SuiteResult {
    pub instances: usize,
    pub worst: f64,
    pub worst_case: String,
}

/// Every differentiable tape op on `seeds` random instances each.
pub fn op_suite(seeds: u64) -> SuiteResult {
    let mut res = SuiteResult {
        instances: 0,
        worst: 0.0,
        worst_case: String::new(),
    };
    for seed in 0..seeds {
        for (name, f, inputs) in op_cases(seed) {
            let err = grad_check_many(|t, v| f(t, v), &inputs, STEP).unwrap();
            res.instances += 1;
            if err > res.worst {
                res.worst = err;
                res.worst_case = format!("{name} seed {seed}");
            }
        }
        res.instances += 1;
        let st = straight_through_error(seed);
        if st > res.worst {
            res.worst = st;
            res.worst_case = format!("straight_through seed {seed}");
        }
    }
    res
}

/// The straight-through op forwards its target, so finite differences see a
/// flat function. Its contract is checked instead: the gradient reaching the
/// input equals the upstream gradient of the target.
fn straight_through_error(seed: u64) -> f64 {
    let mut g = rng(seed ^ 0x57);
    let (m, k) = (g.random_range(1..5), g.random_range(1..5));
    let x = rand_t(&mut g, m, k);
    let target = rand_t(&mut g, m, k);
    let mut t = Tape::new();
    let xv = t.leaf(x.with_grad());
    let st = t.straight_through(xv, &target).unwrap();
    assert_eq!(t.value(st).data(), target.data());
    let loss = project(&mut t, st, seed).unwrap();
    t.backward(loss).unwrap();
    let mut u = Tape::new();
    let tv = u.leaf(target.clone().with_grad());
    let loss2 = project(&mut u, tv, seed).unwrap();
    u.backward(loss2).unwrap();
    t.grad(xv)
        .unwrap()
        .iter()
        .zip(u.grad(tv).unwrap())
        .map(|(a, b)| relative_error(*a, *b))
        .fold(0.0, f64::max)
}

type PairInput = (Tensor<f64>, Arc<SparseMatrix<f64>>, Tensor<f64>, Arc<SparseMatrix<f64>>);

/// Two text/annotation subgraph pairs pooled and normalized the way the
/// aligner does it, with the prototype term carried through straight-through.
pub struct AlignToy {
    pub params: Vec<Tensor<f64>>,
    xs: Vec<PairInput>,
    pub alpha: f64,
    /// Quantized annotation encodings at the base parameters.
    pub z_base: Tensor<f64>,
    h_a_base: Tensor<f64>,
}

impl AlignToy {
    pub fn new(seed: u64, alpha: f64) -> Self {
        let mut g = rng(seed ^ 0x1d);
        let d = 3;
        let cfg = GcnConfig {
            layers: 2,
            hidden: 4,
            adapter_noise: 0.2,
        };
        let params = GcnEncoder::<f64>::new(d, &cfg, seed).unwrap().params;
        let xs = (0..2)
            .map(|_| {
                let (nt, na) = (g.random_range(2..5), g.random_range(1..4));
                (rand_t(&mut g, nt, d), rand_adj(&mut g, nt), rand_t(&mut g, na, d), rand_adj(&mut g, na))
            })
            .collect();
        let mut toy = Self {
            params,
            xs,
            alpha,
            z_base: Tensor::zeros(vec![2, d]),
            h_a_base: Tensor::zeros(vec![2, d]),
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = toy.params.iter().map(|p| t.constant(p.clone())).collect();
        let (_, ha) = toy.pooled(&mut t, &vars).unwrap();
        toy.h_a_base = t.value(ha).clone();
        // codebook rows: the base annotation encodings nudged off themselves
        let noise = rand_t(&mut g, 2, d);
        let z: Vec<f64> = toy.h_a_base.data().iter().zip(noise.data()).map(|(a, n)| a + 0.3 * n).collect();
        toy.z_base = Tensor::matrix(2, d, z).unwrap();
        toy
    }

    fn pooled(&self, t: &mut Tape<f64>, params: &[Var]) -> Result<(Var, Var)> {
        let (mut ts, mut as_) = (Vec::new(), Vec::new());
        for (xt, at, xa, aa) in &self.xs {
            let x = t.constant(xt.clone());
            let h = gcn_forward(t, params, x, at.clone()).map_err(te)?;
            ts.push(t.mean_rows(h)?);
            let x = t.constant(xa.clone());
            let h = gcn_forward(t, params, x, aa.clone()).map_err(te)?;
            as_.push(t.mean_rows(h)?);
        }
        let tt = t.concat_rows(&ts)?;
        let aa = t.concat_rows(&as_)?;
        Ok((t.l2_normalize_rows(tt)?, t.l2_normalize_rows(aa)?))
    }

    /// Loss with `z = h_a + (z_base − h_a_base)`: same value and, by the
    /// straight-through contract, same gradient as the quantized path.
    pub fn loss_shifted(&self, t: &mut Tape<f64>, params: &[Var]) -> Result<Var> {
        let (ht, ha) = self.pooled(t, params)?;
        let shift: Vec<f64> = self.z_base.data().iter().zip(self.h_a_base.data()).map(|(z, h)| z - h).collect();
        let shift = t.constant(Tensor::matrix(2, self.z_base.cols(), shift)?);
        let z = t.add(ha, shift)?;
        Ok(loss_combined(t, ht, ha, z, self.alpha).expect("valid alpha"))
    }

    pub fn loss_straight_through(&self, t: &mut Tape<f64>, params: &[Var]) -> Result<Var> {
        let (ht, ha) = self.pooled(t, params)?;
        let z = t.straight_through(ha, &self.z_base)?;
        Ok(loss_combined(t, ht, ha, z, self.alpha).expect("valid alpha"))
    }

    pub fn grads(&self, straight: bool) -> (f64, Vec<Vec<f64>>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| t.leaf(p.clone().with_grad())).collect();
        let loss = if straight {
            self.loss_straight_through(&mut t, &vars)
        } else {
            self.loss_shifted(&mut t, &vars)
        }
        .unwrap();
        t.backward(loss).unwrap();
        let value = t.value(loss).data()[0];
        (value, vars.iter().map(|v| t.grad(*v).unwrap().to_vec()).collect())
    }
}

/// Worst relative error of the combined alignment loss w.r.t. the encoder
/// parameters, and the worst mismatch between the straight-through and
/// shifted analytic gradients.
pub fn align_loss_check(seed: u64, alpha: f64) -> (f64, f64) {
    let toy = AlignToy::new(seed, alpha);
    let fd = grad_check_many(|t, v| toy.loss_shifted(t, v), &toy.params, STEP).unwrap();
    let (va, ga) = toy.grads(false);
    let (vb, gb) = toy.grads(true);
    assert!((va - vb).abs() < 1e-12, "{va} vs {vb}");
    let st = ga
        .iter()
        .flatten()
        .zip(gb.iter().flatten())
        .map(|(a, b)| relative_error(*a, *b))
        .fold(0.0, f64::max);
    (fd, st)
}

fn six_node_graph() -> (Tensor<f64>, Arc<SparseMatrix<f64>>) {
    let mut g = rng(6);
    let x = rand_t(&mut g, 6, 4);
    let edges = [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (2, 3)];
    let adj = gaga_core::aligner::normalized_adjacency::<f64>(6, &edges);
    (x, Arc::new(adj))
}

fn toy_model(seed: u64, outputs: usize, residual: bool) -> Model<f64> {
    let cfg = GcnConfig {
        layers: 2,
        hidden: 5,
        adapter_noise: 0.2,
    };
    let enc = GcnEncoder::<f64>::new(4, &cfg, seed).unwrap();
    let codebook = rand_t(&mut rng(seed ^ 0xc0de), 3, 4);
    let fusion = FusionConfig { dk: None, residual };
    Model::new(enc, codebook, &fusion, outputs, seed).unwrap()
}

/// Node-classification fine-tune loss on a 6-node graph w.r.t. every
/// trainable parameter (encoder, fusion projections, head).
pub fn finetune_node_check(seed: u64, residual: bool) -> f64 {
    let model = toy_model(seed, 3, residual);
    let (x, adj) = six_node_graph();
    let train = [0usize, 2, 3, 5];
    let targets = [0usize, 1, 2, 1];
    grad_check_many(
        |t, vars| {
            let xv = t.constant(x.clone());
            let logits = model.node_logits(t, vars, xv, adj.clone()).map_err(te)?;
            let sel = t.gather_rows(logits, &train)?;
            t.cross_entropy(sel, &targets)
        },
        &model.params,
        STEP,
    )
    .unwrap()
}

/// Link fine-tune loss on the same graph: BCE over positive and negative
/// pairs.
pub fn finetune_link_check(seed: u64) -> f64 {
    let model = toy_model(seed, 1, false);
    let (x, adj) = six_node_graph();
    let pairs = [(0, 1), (3, 4), (0, 5), (1, 4)];
    let targets = [1.0, 1.0, 0.0, 0.0];
    grad_check_many(
        |t, vars| {
            let xv = t.constant(x.clone());
            let (_, fused) = model.forward(t, vars, xv, adj.clone()).map_err(te)?;
            let logits = model.link_logits(t, vars, fused, &pairs).map_err(te)?;
            t.bce_with_logits(logits, &targets)
        },
        &model.params,
        STEP,
    )
    .unwrap()
}
