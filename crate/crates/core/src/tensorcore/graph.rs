//! Recorded computation graph with reverse-mode gradients.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs for its local derivative rule. Nodes only ever reference earlier
//! nodes, so walking the node list backwards from the root visits each node
//! once in a valid reverse topological order.

use super::{ParamId, ParamStore, Tensor};
use crate::error::{invalid, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Per-column statistics of a training-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance, the usual input to running estimates.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Log(Var),
    Mean(Var),
    Sum(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: BnMode,
    },
    ConcatCols(Vec<Var>),
    Column(Var, usize),
    RowScale(Var, Var),
    Slice(Var, usize),
    BceLogits {
        z: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    FocalLogits {
        z: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        gamma: f64,
        alpha: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// The value graph: an append-only tape of primitive applications.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    relu_margin: f64,
}

/// Gradients of a scalar root with respect to leaves and parameters.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient for a leaf or parameter node; `None` if no path from the root.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`wrt`](Self::wrt) but returns zeros when there is no path.
    pub fn wrt_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }

    /// Adds every parameter gradient into the matching [`ParamStore`] slot.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.by_node[node] {
                store.get_mut(id).accumulate(g);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `c = a * b + beta * c` through `matrixmultiply`, strides in elements.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides (checked above for the dense layouts used here),
    // and `c` does not alias `a` or `b` since it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            relu_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Smallest `|input|` seen by any ReLU so far; gradient checks use it to
    /// stay away from the kink.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push("param", store.get(id).value.clone(), Op::Param(id))
    }

    /// Places every parameter of `store` on the graph, indexed by `ParamId`.
    pub fn bind(&mut self, store: &ParamStore) -> Result<Vec<Var>> {
        (0..store.len()).map(|i| self.param(store, ParamId(i))).collect()
    }

    /// Carves a flat leaf into parameter-shaped views (used to differentiate
    /// with respect to every parameter at once).
    pub fn bind_flat(&mut self, flat: Var, shapes: &[Vec<usize>]) -> Result<Vec<Var>> {
        let mut off = 0;
        let mut out = Vec::with_capacity(shapes.len());
        for s in shapes {
            out.push(self.slice(flat, off, s)?);
            off += s.iter().product::<usize>();
        }
        if off != self.value(flat).len() {
            return Err(invalid(format!(
                "bind_flat: {} scalars supplied, shapes need {off}",
                self.value(flat).len()
            )));
        }
        Ok(out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = (ta.rows(), ta.cols());
        let (k2, m) = (tb.rows(), tb.cols());
        if k != k2 || ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, ta.data(), k, 1, tb.data(), m, 1, 0.0, &mut out);
        let t = Tensor::matrix(n, m, out)?;
        self.push("matmul", t, Op::MatMul(a, b))
    }

    /// `a · bᵀ` with `a: [n, k]`, `b: [m, k]`. Linear layers store weights as
    /// `[out, in]` and go through this.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = (ta.rows(), ta.cols());
        let (m, k2) = (tb.rows(), tb.cols());
        if k != k2 || ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(shape_err("matmul_t", ta, tb));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, ta.data(), k, 1, tb.data(), 1, k, 0.0, &mut out);
        let t = Tensor::matrix(n, m, out)?;
        self.push("matmul_t", t, Op::MatMulT(a, b))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("hadamard", a, b, |x, y| x * y, Op::Hadamard(a, b))
    }

    /// Row-broadcast bias add: `x: [n, c]`, `bias: [1, c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.len() != c || tb.rows() != 1 {
            return Err(shape_err("add_bias", tx, tb));
        }
        let bd = tb.data();
        let data = tx
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(bd).map(|(v, b)| v + b))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_bias", t, Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * s).collect())?;
        self.push("scale", t, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let margin = tx.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        )?;
        self.relu_margin = self.relu_margin.min(margin);
        self.push("relu", t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| sigmoid(v)).collect())?;
        self.push("sigmoid", t, Op::Sigmoid(x))
    }

    /// Softmax over the last axis of a `[n, c]` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = Vec::with_capacity(tx.len());
        for row in tx.data().chunks_exact(c) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut total = 0.0;
            for &v in row {
                let e = (v - mx).exp();
                total += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v /= total;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("softmax", t, Op::SoftmaxRows(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.data().iter().any(|&v| v <= 0.0) {
            return Err(invalid("log: non-positive input"));
        }
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.ln()).collect())?;
        self.push("log", t, Op::Log(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let m = tx.data().iter().sum::<f64>() / tx.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x))
    }

    /// Batch normalisation over rows. In `Train` mode the batch statistics
    /// normalise and are returned for the running-estimate update; `Infer`
    /// mode normalises by the supplied running statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running: (&[f64], &[f64]),
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, c) = (tx.rows(), tx.cols());
        if tg.len() != c || tb.len() != c {
            return Err(shape_err("batchnorm", tx, tg));
        }
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(invalid("batchnorm: training mode needs a batch of at least 2"));
                }
                let mut mean = vec![0.0; c];
                for row in tx.data().chunks_exact(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for row in tx.data().chunks_exact(c) {
                    for j in 0..c {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                let unbiased = var.iter().map(|v| v / (n - 1) as f64).collect();
                var.iter_mut().for_each(|v| *v /= n as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Infer => {
                if running.0.len() != c || running.1.len() != c {
                    return Err(invalid("batchnorm: running statistics have the wrong width"));
                }
                (running.0.to_vec(), running.1.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(n * c);
        let mut out = Vec::with_capacity(n * c);
        for row in tx.data().chunks_exact(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(tg.data()[j] * h + tb.data()[j]);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let v = self.push(
            "batchnorm",
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
        )?;
        Ok((v, stats))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat_cols: no inputs"))?;
        let n = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != n {
                return Err(shape_err("concat_cols", self.value(*first), self.value(*p)));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let t = Tensor::matrix(n, total, data)?;
        self.push("concat_cols", t, Op::ConcatCols(parts.to_vec()))
    }

    /// Column `k` of a `[n, c]` matrix as `[n, 1]`.
    pub fn column(&mut self, x: Var, k: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if k >= c {
            return Err(invalid(format!("column: index {k} out of range for width {c}")));
        }
        let data = tx.data().chunks_exact(c).map(|r| r[k]).collect();
        let t = Tensor::matrix(tx.rows(), 1, data)?;
        self.push("column", t, Op::Column(x, k))
    }

    /// Multiplies row `i` of `x: [n, c]` by `s[i]` where `s: [n, 1]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.cols() != 1 || ts.rows() != tx.rows() {
            return Err(shape_err("row_scale", tx, ts));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .chunks_exact(c)
            .zip(ts.data())
            .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("row_scale", t, Op::RowScale(x, s))
    }

    /// Contiguous flat slice of `x` starting at `offset`, reshaped.
    pub fn slice(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let len: usize = shape.iter().product();
        if offset + len > tx.len() {
            return Err(invalid(format!(
                "slice: [{offset}, {}) exceeds {} entries",
                offset + len,
                tx.len()
            )));
        }
        let t = Tensor::new(shape.to_vec(), tx.data()[offset..offset + len].to_vec())?;
        self.push("slice", t, Op::Slice(x, offset))
    }

    fn check_targets(&self, z: Var, targets: &[f64], weights: &[f64], name: &str) -> Result<()> {
        let tz = self.value(z);
        if tz.cols() != 1 || targets.len() != tz.rows() || weights.len() != tz.rows() {
            return Err(invalid(format!(
                "{name}: logits {:?}, {} targets, {} weights",
                tz.shape(),
                targets.len(),
                weights.len()
            )));
        }
        if targets.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(invalid(format!("{name}: targets must be 0 or 1")));
        }
        Ok(())
    }

    /// Weighted binary cross-entropy from logits, summed:
    /// `Σ wᵢ softplus(−sᵢ zᵢ)` with `sᵢ = 2yᵢ − 1`, which equals
    /// `Σ wᵢ (softplus(zᵢ) − yᵢ zᵢ)` for binary targets.
    pub fn bce_logits(&mut self, z: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        self.check_targets(z, targets, weights, "bce_logits")?;
        let total = self
            .value(z)
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&zi, &y), &w)| {
                if w == 0.0 {
                    0.0
                } else {
                    w * softplus(-(2.0 * y - 1.0) * zi)
                }
            })
            .sum();
        self.push(
            "bce_logits",
            Tensor::scalar(total),
            Op::BceLogits {
                z,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    /// Weighted focal loss from logits, summed:
    /// `Σ wᵢ α (1 − p_t)^γ (−ln p_t)`.
    pub fn focal_logits(&mut self, z: Var, targets: &[f64], weights: &[f64], gamma: f64, alpha: f64) -> Result<Var> {
        self.check_targets(z, targets, weights, "focal_logits")?;
        if gamma < 0.0 {
            return Err(invalid("focal_logits: gamma must be non-negative"));
        }
        let total = self
            .value(z)
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&zi, &y), &w)| {
                if w == 0.0 {
                    return 0.0;
                }
                let u = (2.0 * y - 1.0) * zi;
                let q = sigmoid(-u);
                w * alpha * q.powf(gamma) * softplus(-u)
            })
            .sum();
        self.push(
            "focal_logits",
            Tensor::scalar(total),
            Op::FocalLogits {
                z,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                gamma,
                alpha,
            },
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(invalid(format!(
                "backward: root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut params = Vec::new();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if grads[i].is_some() {
                        params.push((*id, i));
                    }
                    continue;
                }
                _ => {}
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads);
        }
        Ok(Gradients { by_node: grads, params })
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let len = self.value(v).len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |g| gemm(n, m, k, dy, m, 1, tb.data(), 1, m, 1.0, g));
                acc(*b, &mut |g| gemm(k, n, m, ta.data(), 1, k, dy, m, 1, 1.0, g));
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
                acc(*a, &mut |g| gemm(n, m, k, dy, m, 1, tb.data(), k, 1, 1.0, g));
                acc(*b, &mut |g| gemm(m, n, k, dy, 1, m, ta.data(), k, 1, 1.0, g));
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    acc(*v, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                }
            }
            Op::AddBias(x, bias) => {
                acc(*x, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                let c = self.value(*bias).len();
                acc(*bias, &mut |g| {
                    for row in dy.chunks_exact(c) {
                        g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::Hadamard(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |g| {
                    for ((g, d), o) in g.iter_mut().zip(dy).zip(tb.data()) {
                        *g += d * o;
                    }
                });
                acc(*b, &mut |g| {
                    for ((g, d), o) in g.iter_mut().zip(dy).zip(ta.data()) {
                        *g += d * o;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * s)),
            Op::Relu(x) => {
                let tx = self.value(*x);
                acc(*x, &mut |g| {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(tx.data()) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |g| {
                    for ((g, d), s) in g.iter_mut().zip(dy).zip(y) {
                        *g += d * s * (1.0 - s);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let s = &node.value;
                let c = s.cols();
                acc(*x, &mut |g| {
                    for ((gr, dr), sr) in g
                        .chunks_exact_mut(c)
                        .zip(dy.chunks_exact(c))
                        .zip(s.data().chunks_exact(c))
                    {
                        let dot: f64 = dr.iter().zip(sr).map(|(d, s)| d * s).sum();
                        for ((g, d), s) in gr.iter_mut().zip(dr).zip(sr) {
                            *g += s * (d - dot);
                        }
                    }
                });
            }
            Op::Log(x) => {
                let tx = self.value(*x);
                acc(*x, &mut |g| {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(tx.data()) {
                        *g += d / v;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += dy[0] / n));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let c = inv_std.len();
                let n = xhat.len() / c;
                let gam = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (dr, hr) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        sum_dy[j] += dr[j];
                        sum_dy_xhat[j] += dr[j] * hr[j];
                    }
                }
                acc(*gamma, &mut |g| {
                    g.iter_mut().zip(&sum_dy_xhat).for_each(|(g, s)| *g += s)
                });
                acc(*beta, &mut |g| g.iter_mut().zip(&sum_dy).for_each(|(g, s)| *g += s));
                let nf = n as f64;
                acc(*x, &mut |g| {
                    for ((gr, dr), hr) in g.chunks_exact_mut(c).zip(dy.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            let k = gam[j] * inv_std[j];
                            gr[j] += match mode {
                                BnMode::Train => k / nf * (nf * dr[j] - sum_dy[j] - hr[j] * sum_dy_xhat[j]),
                                BnMode::Infer => k * dr[j],
                            };
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(*p, &mut |g| {
                        for (gr, dr) in g.chunks_exact_mut(w).zip(dy.chunks_exact(total)) {
                            gr.iter_mut().zip(&dr[off..off + w]).for_each(|(g, d)| *g += d);
                        }
                    });
                    off += w;
                }
            }
            Op::Column(x, k) => {
                let c = self.value(*x).cols();
                acc(*x, &mut |g| {
                    for (gr, d) in g.chunks_exact_mut(c).zip(dy) {
                        gr[*k] += d;
                    }
                });
            }
            Op::RowScale(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let c = tx.cols();
                acc(*x, &mut |g| {
                    for ((gr, dr), k) in g.chunks_exact_mut(c).zip(dy.chunks_exact(c)).zip(ts.data()) {
                        gr.iter_mut().zip(dr).for_each(|(g, d)| *g += d * k);
                    }
                });
                acc(*s, &mut |g| {
                    for ((gs, dr), xr) in g.iter_mut().zip(dy.chunks_exact(c)).zip(tx.data().chunks_exact(c)) {
                        *gs += dr.iter().zip(xr).map(|(d, v)| d * v).sum::<f64>();
                    }
                });
            }
            Op::Slice(x, offset) => {
                let len = node.value.len();
                acc(*x, &mut |g| {
                    g[*offset..offset + len].iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                });
            }
            Op::BceLogits { z, targets, weights } => {
                let tz = self.value(*z);
                acc(*z, &mut |g| {
                    for (((g, zi), y), w) in g.iter_mut().zip(tz.data()).zip(targets).zip(weights) {
                        if *w != 0.0 {
                            *g += dy[0] * w * (sigmoid(*zi) - y);
                        }
                    }
                });
            }
            Op::FocalLogits {
                z,
                targets,
                weights,
                gamma,
                alpha,
            } => {
                let tz = self.value(*z);
                acc(*z, &mut |g| {
                    for (((g, zi), y), w) in g.iter_mut().zip(tz.data()).zip(targets).zip(weights) {
                        if *w == 0.0 {
                            continue;
                        }
                        let s = 2.0 * y - 1.0;
                        let u = s * zi;
                        let p = sigmoid(u);
                        let q = sigmoid(-u);
                        let log_p = -softplus(-u);
                        // d/du of α q^γ (−ln p)
                        let du = alpha * q.powf(*gamma) * (gamma * p * log_p - q);
                        *g += dy[0] * w * s * du;
                    }
                });
            }
        }
    }
}
