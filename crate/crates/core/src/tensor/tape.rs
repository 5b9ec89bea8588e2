use std::sync::Arc;

use super::kernels;
use super::{Real, Result, SparseMatrix, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<SparseMatrix<T>>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Sum(Var),
    MeanRows(Var),
    RowSum(Var),
    SqNormRows(Var),
    L2NormalizeRows(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    PairwiseSqDist(Var, Var),
    StraightThrough(Var),
    CrossEntropy(Var, Vec<usize>),
    BceWithLogits(Var, Vec<T>),
}

#[derive(Clone, Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so every operation's inputs precede
/// it and a single reverse sweep visits each node once. Gradients of leaves
/// created with `requires_grad` accumulate (`+=`) into their grad buffers.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

const NORM_EPS: f64 = 1e-12;

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        tensor.clear_grad();
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::PairwiseSqDist(a, b) => {
                self.rg(*a) || self.rg(*b)
            }
            Op::ConcatRows(vs) => vs.iter().any(|v| self.rg(*v)),
            Op::SpMM(_, a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::MeanRows(a)
            | Op::RowSum(a)
            | Op::SqNormRows(a)
            | Op::L2NormalizeRows(a)
            | Op::GatherRows(a, _)
            | Op::StraightThrough(a)
            | Op::CrossEntropy(a, _)
            | Op::BceWithLogits(a, _) => self.rg(*a),
        };
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn require_matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Contract(format!("{op} expects a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_matrix(a, "matmul")?;
        let (k2, n) = self.require_matrix(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b), "matmul")
    }

    /// Sparse constant times dense: `adj · x`.
    pub fn spmm(&mut self, adj: Arc<SparseMatrix<T>>, x: Var) -> Result<Var> {
        let (r, n) = self.require_matrix(x, "spmm")?;
        if adj.cols() != r {
            return Err(shape_err("spmm", &[adj.rows(), adj.cols()], self.shape(x)));
        }
        let out = adj.matmul_dense(self.value(x).data(), n);
        let rows = adj.rows();
        self.push(vec![rows, n], out, Op::SpMM(adj, x), "spmm")
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), "mul")
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.require_matrix(a, "add_row")?;
        if self.shape(row) != [1, n] {
            return Err(shape_err("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(&x, &y)| x + y).collect::<Vec<_>>())
            .collect();
        debug_assert_eq!(out.len(), m * n);
        self.push(vec![m, n], out, Op::AddRow(a, row), "add_row")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| x * s).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| x + s).collect();
        self.push(self.shape(a).to_vec(), out, Op::AddScalar(a), "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.require_matrix(a, "transpose")?;
        let t = self.value(a).transpose();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Transpose(a), "transpose")
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.require_matrix(a, "softmax_rows")?;
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(a).data().chunks(n) {
            out.extend(softmax(row));
        }
        self.push(vec![m, n], out, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        self.push(vec![1], vec![T::from_f64(s)], Op::Sum(a), "sum")
    }

    /// Column means: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.require_matrix(a, "mean_rows")?;
        let mut acc = vec![0f64; n];
        for row in self.value(a).data().chunks(n) {
            for (s, v) in acc.iter_mut().zip(row) {
                *s += v.as_f64();
            }
        }
        let out = acc.into_iter().map(|s| T::from_f64(s / m as f64)).collect();
        self.push(vec![1, n], out, Op::MeanRows(a), "mean_rows")
    }

    /// Per-row sums: `m×n → m×1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.require_matrix(a, "row_sum")?;
        let out = self
            .value(a)
            .data()
            .chunks(n)
            .map(|r| T::from_f64(r.iter().map(|v| v.as_f64()).sum()))
            .collect();
        self.push(vec![m, 1], out, Op::RowSum(a), "row_sum")
    }

    /// Per-row squared L2 norms: `m×n → m×1`.
    pub fn sq_norm_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.require_matrix(a, "sq_norm_rows")?;
        let out = self
            .value(a)
            .data()
            .chunks(n)
            .map(|r| T::from_f64(r.iter().map(|v| v.as_f64() * v.as_f64()).sum()))
            .collect();
        self.push(vec![m, 1], out, Op::SqNormRows(a), "sq_norm_rows")
    }

    /// Divides each row by `max(‖row‖, 1e-12)`.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.require_matrix(a, "l2_normalize_rows")?;
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(a).data().chunks(n) {
            let norm = row_norm(row);
            out.extend(row.iter().map(|v| T::from_f64(v.as_f64() / norm)));
        }
        self.push(vec![m, n], out, Op::L2NormalizeRows(a), "l2_normalize_rows")
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.require_matrix(a, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(TensorError::Contract(format!("gather_rows index {bad} out of {m} rows")));
        }
        if idx.is_empty() {
            return Err(TensorError::Contract("gather_rows with no indices".into()));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(src.row(i));
        }
        self.push(vec![idx.len(), n], out, Op::GatherRows(a, idx.to_vec()), "gather_rows")
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows with no inputs".into()))?;
        let (_, n) = self.require_matrix(first, "concat_rows")?;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.require_matrix(p, "concat_rows")?;
            if pn != n {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            m += pm;
        }
        self.push(vec![m, n], out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// `D[i,j] = ‖a_i − b_j‖²` for `a: m×d`, `b: n×d`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.require_matrix(a, "pairwise_sq_dist")?;
        let (n, d2) = self.require_matrix(b, "pairwise_sq_dist")?;
        if d != d2 {
            return Err(shape_err("pairwise_sq_dist", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(T::from_f64(sq_dist(av.row(i), bv.row(j))));
            }
        }
        self.push(vec![m, n], out, Op::PairwiseSqDist(a, b), "pairwise_sq_dist")
    }

    /// Forward value is `target`; the backward pass hands the incoming
    /// gradient to `a` unchanged.
    pub fn straight_through(&mut self, a: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(a) != target.shape() {
            return Err(shape_err("straight_through", self.shape(a), target.shape()));
        }
        self.push(
            target.shape().to_vec(),
            target.data().to_vec(),
            Op::StraightThrough(a),
            "straight_through",
        )
    }

    /// Mean softmax cross-entropy of `logits: m×C` against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, c) = self.require_matrix(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Contract(format!("target class {bad} out of {c}")));
        }
        let lv = self.value(logits);
        let mut total = 0f64;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            total += log_sum_exp(row) - row[t].as_f64();
        }
        self.push(
            vec![1],
            vec![T::from_f64(total / m as f64)],
            Op::CrossEntropy(logits, targets.to_vec()),
            "cross_entropy",
        )
    }

    /// Mean binary cross-entropy on raw logits, computed in the stable form
    /// `max(x,0) − x·y + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != targets.len() {
            return Err(shape_err("bce_with_logits", lv.shape(), &[targets.len()]));
        }
        let mut total = 0f64;
        for (&x, &y) in lv.data().iter().zip(targets) {
            let (x, y) = (x.as_f64(), y.as_f64());
            total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        }
        let n = targets.len() as f64;
        self.push(
            vec![1],
            vec![T::from_f64(total / n)],
            Op::BceWithLogits(logits, targets.to_vec()),
            "bce_with_logits",
        )
    }

    /// Reverse sweep from a one-element `loss`, seeding its gradient with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            let mut send = |v: Var, delta: Vec<T>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a = *a + d),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => leaf_grads.push((id, g)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.nodes[a.0].requires_grad {
                        send(*a, kernels::matmul_bt(&g, bv.data(), m, n, k));
                    }
                    if self.nodes[b.0].requires_grad {
                        send(*b, kernels::matmul_at(av.data(), &g, m, k, n));
                    }
                }
                Op::SpMM(adj, x) => {
                    let n = out.cols();
                    send(*x, adj.transpose_matmul_dense(&g, n));
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|&v| -v).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    send(*a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
                    send(*b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
                }
                Op::AddRow(a, row) => {
                    let n = out.cols();
                    let mut acc = vec![0f64; n];
                    for chunk in g.chunks(n) {
                        for (s, v) in acc.iter_mut().zip(chunk) {
                            *s += v.as_f64();
                        }
                    }
                    send(*row, acc.into_iter().map(T::from_f64).collect());
                    send(*a, g);
                }
                Op::Scale(a, s) => send(*a, g.iter().map(|&v| v * *s).collect()),
                Op::AddScalar(a) => send(*a, g),
                Op::Relu(a) => {
                    let x = self.nodes[a.0].value.data();
                    send(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                            .collect(),
                    );
                }
                Op::Sigmoid(a) => {
                    let y = out.data();
                    send(*a, g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect());
                }
                Op::Transpose(a) => {
                    let (r, c) = (out.rows(), out.cols());
                    let gt = Tensor::matrix(r, c, g)?.transpose().into_data();
                    send(*a, gt);
                }
                Op::SoftmaxRows(a) => {
                    let n = out.cols();
                    let mut dx = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(n).zip(out.data().chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g.as_f64() * y.as_f64()).sum();
                        dx.extend(
                            gr.iter()
                                .zip(yr)
                                .map(|(g, y)| T::from_f64(y.as_f64() * (g.as_f64() - dot))),
                        );
                    }
                    send(*a, dx);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.numel();
                    send(*a, vec![g[0]; n]);
                }
                Op::MeanRows(a) => {
                    let m = self.nodes[a.0].value.rows();
                    let scaled: Vec<T> = g.iter().map(|&v| T::from_f64(v.as_f64() / m as f64)).collect();
                    send(*a, scaled.repeat(m));
                }
                Op::RowSum(a) => {
                    let n = self.nodes[a.0].value.cols();
                    send(*a, g.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect());
                }
                Op::SqNormRows(a) => {
                    let xv = &self.nodes[a.0].value;
                    let n = xv.cols();
                    let two = T::from_f64(2.0);
                    let dx = xv
                        .data()
                        .chunks(n)
                        .zip(&g)
                        .flat_map(|(r, &gi)| r.iter().map(move |&x| two * x * gi))
                        .collect();
                    send(*a, dx);
                }
                Op::L2NormalizeRows(a) => {
                    let xv = &self.nodes[a.0].value;
                    let n = xv.cols();
                    let mut dx = Vec::with_capacity(g.len());
                    for ((xr, yr), gr) in xv.data().chunks(n).zip(out.data().chunks(n)).zip(g.chunks(n)) {
                        let norm = row_norm(xr);
                        let clamped = xr.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt() < NORM_EPS;
                        if clamped {
                            dx.extend(gr.iter().map(|v| T::from_f64(v.as_f64() / norm)));
                            continue;
                        }
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g.as_f64() * y.as_f64()).sum();
                        dx.extend(
                            gr.iter()
                                .zip(yr)
                                .map(|(g, y)| T::from_f64((g.as_f64() - y.as_f64() * dot) / norm)),
                        );
                    }
                    send(*a, dx);
                }
                Op::GatherRows(a, idx) => {
                    let src = &self.nodes[a.0].value;
                    let n = src.cols();
                    let mut acc = vec![0f64; src.numel()];
                    for (k, &i) in idx.iter().enumerate() {
                        for (s, v) in acc[i * n..(i + 1) * n].iter_mut().zip(&g[k * n..(k + 1) * n]) {
                            *s += v.as_f64();
                        }
                    }
                    send(*a, acc.into_iter().map(T::from_f64).collect());
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.numel();
                        send(*p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::PairwiseSqDist(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, n, d) = (av.rows(), bv.rows(), av.cols());
                    let mut ga = vec![0f64; m * d];
                    let mut gb = vec![0f64; n * d];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j].as_f64();
                            if gij == 0.0 {
                                continue;
                            }
                            for c in 0..d {
                                let diff = 2.0 * (av.row(i)[c].as_f64() - bv.row(j)[c].as_f64()) * gij;
                                ga[i * d + c] += diff;
                                gb[j * d + c] -= diff;
                            }
                        }
                    }
                    send(*a, ga.into_iter().map(T::from_f64).collect());
                    send(*b, gb.into_iter().map(T::from_f64).collect());
                }
                Op::StraightThrough(a) => send(*a, g),
                Op::CrossEntropy(logits, targets) => {
                    let lv = &self.nodes[logits.0].value;
                    let c = lv.cols();
                    let scale = g[0].as_f64() / targets.len() as f64;
                    let mut dx = Vec::with_capacity(lv.numel());
                    for (i, &t) in targets.iter().enumerate() {
                        let p = softmax(lv.row(i));
                        for (j, pj) in p.into_iter().enumerate().take(c) {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dx.push(T::from_f64((pj.as_f64() - onehot) * scale));
                        }
                    }
                    send(*logits, dx);
                }
                Op::BceWithLogits(logits, targets) => {
                    let lv = &self.nodes[logits.0].value;
                    let scale = g[0].as_f64() / targets.len() as f64;
                    let dx = lv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&x, &y)| T::from_f64((sigmoid(x).as_f64() - y.as_f64()) * scale))
                        .collect();
                    send(*logits, dx);
                }
            }
        }

        for (id, g) in leaf_grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite("backward"));
            }
            self.nodes[id].value.accumulate_grad(&g)?;
        }
        Ok(())
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    let x = x.as_f64();
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    T::from_f64(y)
}

fn log_sum_exp<T: Real>(row: &[T]) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| T::from_f64(e / z)).collect()
}

fn row_norm<T: Real>(row: &[T]) -> f64 {
    row.iter()
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
        .max(NORM_EPS)
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_hand_dot_product() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(m(&[vec![1.0, 2.0]]));
        let b = t.leaf(m(&[vec![3.0], vec![4.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(m(&[vec![-1.0, 2.0]]));
        let r = t.relu(a).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 2.0]);
        let x = t.leaf(m(&[vec![1.0, 2.0]]));
        let y = t.leaf(m(&[vec![3.0, 4.0]]));
        let p = t.mul(x, y).unwrap();
        assert_eq!(t.value(p).data(), &[3.0, 8.0]);
        let v = t.leaf(m(&[vec![3.0, 4.0]]));
        let n = t.l2_normalize_rows(v).unwrap();
        let got = t.value(n).data();
        assert!((got[0] - 0.6).abs() < 1e-12 && (got[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = Tape::<f32>::new();
        let a = t.leaf(Tensor::zeros(vec![1, 2]));
        let b = t.leaf(Tensor::zeros(vec![1, 3]));
        assert!(matches!(t.add(a, b), Err(TensorError::Shape { .. })));
        assert!(matches!(t.mul(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(m(&[vec![0.0, 0.0], vec![1000.0, 1000.0], vec![0.0, 3f64.ln()]]));
        let s = t.softmax_rows(a).unwrap();
        let v = t.value(s).data();
        for (got, want) in v.iter().zip([0.5, 0.5, 0.5, 0.5, 0.25, 0.75]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn backward_sum_and_square() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![1], vec![3.0]).unwrap().with_grad());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::<f32>::zeros(vec![2, 2]).with_grad());
        assert!(matches!(t.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn gradients_accumulate_and_replay_deterministically() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(m(&[vec![0.3, -1.2], vec![2.0, 0.7]]).with_grad());
        let w = t.leaf(m(&[vec![1.5, 0.1], vec![-0.4, 0.9]]).with_grad());
        let h = t.matmul(x, w).unwrap();
        let s = t.softmax_rows(h).unwrap();
        let sq = t.sq_norm_rows(s).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        let first = t.grad(w).unwrap().to_vec();
        t.backward(loss).unwrap();
        let doubled: Vec<f64> = first.iter().map(|v| 2.0 * v).collect();
        assert_eq!(t.grad(w).unwrap(), doubled.as_slice());
        t.zero_grad();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), first.as_slice());
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::new(vec![1], vec![f32::MAX]).unwrap());
        assert!(matches!(t.scale(x, 10.0), Err(TensorError::NonFinite(_))));
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut t = Tape::<f64>::new();
        let h = t.leaf(m(&[vec![1.0, 2.0]]).with_grad());
        let z = t.straight_through(h, &m(&[vec![5.0, 5.0]])).unwrap();
        assert_eq!(t.value(z).data(), &[5.0, 5.0]);
        let s = t.sum(z).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(h).unwrap(), &[1.0, 1.0]);
    }
}
