//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Every operation appends one node to the tape; nodes only reference
//! earlier nodes, so the tape is always in topological order and the
//! backward sweep is a single reverse pass over it.

use std::sync::Arc;

use crate::attention::{self, AttentionMask};
use crate::error::{Error, Result};
use crate::tensor::{self, check_finite, Tensor, NEG_INF_SENTINEL};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Block {
        src: Var,
        row0: usize,
        col0: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        src: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SquaredDistance {
        student: Var,
        target: Vec<f64>,
    },
    AttendSparse {
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<AttentionMask>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of the operations of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when it is not on the loss path.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }

    /// Gradient as a tensor; variables off the loss path get zeros.
    pub fn tensor(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => Tensor::from_parts(self.shapes[var.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    /// Writes the gradient of `var` into `target`'s grad slot (zeros when off-path).
    pub fn write_into(&self, var: Var, target: &mut Tensor) -> Result<()> {
        target.set_grad(self.tensor(var).into_data())
    }
}

/// Populates gradients for every node reachable from `loss`.
pub fn backward(loss: Var, tape: &Tape) -> Result<Gradients> {
    tape.backward(loss)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records a copy of `t`; it participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.push(value, t.requires_grad(), Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        self.push(value, false, Op::Leaf)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        let value = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        self.push(value, true, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[Var],
        op: Op,
    ) -> Result<Var> {
        check_finite(name, &data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Tensor::from_parts(shape, data), requires_grad, op))
    }

    fn dims(&self, var: Var) -> Result<(usize, usize)> {
        self.value(var).matrix_dims()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, p) = self.dims(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: [{m}x{k}] x [{k2}x{p}]"
            )));
        }
        let out = tensor::matmul(self.value(a).data(), self.value(b).data(), m, k, p);
        self.record("matmul", vec![m, p], out, &[a, b], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let out = tensor::transpose(self.value(a).data(), r, c);
        self.record("transpose", vec![c, r], out, &[a], Op::Transpose(a))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!(
                "{op}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        self.record("add", shape, out, &[a, b], Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        self.record("mul", shape, out, &[a, b], Op::Mul(a, b))
    }

    /// Adds a length-`cols` bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let b = self.value(bias);
        if b.numel() != c {
            return Err(Error::Dimension(format!(
                "bias of {} entries for {c} columns",
                b.numel()
            )));
        }
        let bd = b.data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, bv) in row.iter_mut().zip(bd) {
                *o += bv;
            }
        }
        self.record(
            "add_bias",
            vec![r, c],
            out,
            &[a, bias],
            Op::AddBias(a, bias),
        )
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let out = self.value(a).data().iter().map(|x| x * factor).collect();
        self.record("scale", shape, out, &[a], Op::Scale(a, factor))
    }

    /// Tanh-approximated GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_COEF * x * x * x)).tanh()))
            .collect();
        self.record("gelu", shape, out, &[a], Op::Gelu(a))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Dimension(format!(
                "layer_norm parameters must have {c} entries"
            )));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.record("layer_norm", vec![r, c], out, &[x, gamma, beta], op)
    }

    /// Row-wise softmax. `additive_mask` entries must be `0` or
    /// [`NEG_INF_SENTINEL`]; sentinel positions come out exactly `0`.
    pub fn softmax_rows(&mut self, x: Var, additive_mask: Option<&Tensor>) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let allowed: Option<Vec<bool>> = match additive_mask {
            None => None,
            Some(m) => {
                if m.shape() != [r, c] {
                    return Err(Error::Dimension(format!(
                        "mask shape {:?} for scores [{r}x{c}]",
                        m.shape()
                    )));
                }
                let mut flags = Vec::with_capacity(r * c);
                for &v in m.data() {
                    if v == 0.0 {
                        flags.push(true);
                    } else if v == NEG_INF_SENTINEL {
                        flags.push(false);
                    } else {
                        return Err(Error::Contract(format!(
                            "additive mask entry {v} is neither 0 nor the -inf sentinel"
                        )));
                    }
                }
                Some(flags)
            }
        };
        let xs = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let ok = |j: usize| allowed.as_ref().is_none_or(|a| a[i * c + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if ok(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: i });
            }
            let orow = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for j in 0..c {
                if ok(j) {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    sum += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        self.record("softmax_rows", vec![r, c], out, &[x], Op::Softmax(x))
    }

    /// Copies the `rows × cols` sub-matrix starting at `(row0, col0)`.
    pub fn block(
        &mut self,
        src: Var,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    ) -> Result<Var> {
        let (r, c) = self.dims(src)?;
        if rows == 0 || cols == 0 || row0 + rows > r || col0 + cols > c {
            return Err(Error::Dimension(format!(
                "block [{row0}+{rows}, {col0}+{cols}] outside [{r}x{c}]"
            )));
        }
        let s = self.value(src).data();
        let mut out = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            out.extend_from_slice(&s[i * c + col0..i * c + col0 + cols]);
        }
        self.record(
            "block",
            vec![rows, cols],
            out,
            &[src],
            Op::Block { src, row0, col0 },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero parts".into()))?;
        let (r, _) = self.dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pr != r {
                return Err(Error::Dimension("concat_cols row counts differ".into()));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.record(
            "concat_cols",
            vec![r, total],
            out,
            parts,
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero parts".into()))?;
        let (_, c) = self.dims(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pc != c {
                return Err(Error::Dimension("concat_rows column counts differ".into()));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        self.record(
            "concat_rows",
            vec![rows, c],
            out,
            parts,
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// Selects rows of `src` by index (embedding lookup, pooling).
    pub fn gather_rows(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(src)?;
        if indices.is_empty() {
            return Err(Error::Dimension("gather of zero rows".into()));
        }
        let s = self.value(src).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::Dimension(format!("row {i} outside {r} rows")));
            }
            out.extend_from_slice(&s[i * c..(i + 1) * c]);
        }
        let op = Op::GatherRows {
            src,
            indices: indices.to_vec(),
        };
        self.record("gather_rows", vec![indices.len(), c], out, &[src], op)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.record("sum", vec![1], vec![total], &[a], Op::Sum(a))
    }

    /// Batch-mean of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims(logits)?;
        if labels.len() != b {
            return Err(Error::Dimension(format!(
                "{} labels for {b} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for i in 0..b {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_norm = max + sum.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - log_norm).exp();
            }
            total += log_norm - row[labels[i]];
        }
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.record(
            "cross_entropy",
            vec![1],
            vec![total / b as f64],
            &[logits],
            op,
        )
    }

    /// Batch-mean of `‖target − student‖²` over rows; `target` is a constant.
    pub fn squared_distance(&mut self, student: Var, target: &Tensor) -> Result<Var> {
        let (b, _) = self.dims(student)?;
        if self.value(student).shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "student logits {:?} vs teacher logits {:?}",
                self.value(student).shape(),
                target.shape()
            )));
        }
        let total: f64 = self
            .value(student)
            .data()
            .iter()
            .zip(target.data())
            .map(|(s, t)| (t - s) * (t - s))
            .sum();
        let op = Op::SquaredDistance {
            student,
            target: target.data().to_vec(),
        };
        self.record(
            "squared_distance",
            vec![1],
            vec![total / b as f64],
            &[student],
            op,
        )
    }

    /// Gathered sparse attention: each query row only touches its permitted keys.
    pub fn attend_sparse(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<AttentionMask>,
    ) -> Result<Var> {
        let (n, d) = attention::check_qkv(self.value(q), self.value(k), self.value(v), &mask)?;
        let (out, probs) = attention::sparse_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            &mask,
        );
        let op = Op::AttendSparse {
            q,
            k,
            v,
            mask,
            probs,
        };
        self.record("attend_sparse", vec![n, d], out, &[q, k, v], op)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).matrix_dims().unwrap();
                let p = self.value(*b).cols();
                if self.requires_grad(*a) {
                    let ga = tensor::matmul_nt(g, self.value(*b).data(), m, k, p);
                    self.accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let gb = tensor::matmul_tn(self.value(*a).data(), g, m, k, p);
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).matrix_dims().unwrap();
                // output is [c x r]
                let ga = tensor::transpose(g, c, r);
                self.accumulate(grads, *a, &ga);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let ga = zip_map(g, bv, |x, y| x * y);
                    self.accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let gb = zip_map(g, av, |x, y| x * y);
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g);
                if self.requires_grad(*bias) {
                    let c = self.value(*bias).numel();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, &gb);
                }
            }
            Op::Scale(a, factor) => {
                let ga: Vec<f64> = g.iter().map(|v| v * factor).collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::Gelu(a) => {
                let ga: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| {
                        let inner = GELU_SCALE * (x + GELU_COEF * x * x * x);
                        let t = inner.tanh();
                        let dinner = GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
                    })
                    .collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            dgamma[j] += grow[j] * hrow[j];
                            dbeta[j] += grow[j];
                        }
                    }
                    self.accumulate(grads, *gamma, &dgamma);
                    self.accumulate(grads, *beta, &dbeta);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let nf = c as f64;
                    for (i, &inv) in inv_std.iter().enumerate() {
                        let grow = &g[i * c..(i + 1) * c];
                        let hrow = &xhat[i * c..(i + 1) * c];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..c {
                            let dh = grow[j] * gam[j];
                            sum_d += dh;
                            sum_dh += dh * hrow[j];
                        }
                        for j in 0..c {
                            let dh = grow[j] * gam[j];
                            dx[i * c + j] = inv / nf * (nf * dh - sum_d - hrow[j] * sum_dh);
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut gx = vec![0.0; y.len()];
                for ((grow, yrow), orow) in g
                    .chunks_exact(c)
                    .zip(y.chunks_exact(c))
                    .zip(gx.chunks_exact_mut(c))
                {
                    let inner = tensor::dot(grow, yrow);
                    for j in 0..c {
                        orow[j] = yrow[j] * (grow[j] - inner);
                    }
                }
                self.accumulate(grads, *x, &gx);
            }
            Op::Block { src, row0, col0 } => {
                if !self.requires_grad(*src) {
                    return;
                }
                let (rows, cols) = node.value.matrix_dims().unwrap();
                let c = self.value(*src).cols();
                let slot = self.slot(grads, *src);
                for i in 0..rows {
                    let dst = &mut slot[(row0 + i) * c + col0..(row0 + i) * c + col0 + cols];
                    for (d, v) in dst.iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                        *d += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let r = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, &gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::GatherRows { src, indices } => {
                if !self.requires_grad(*src) {
                    return;
                }
                let c = self.value(*src).cols();
                let slot = self.slot(grads, *src);
                for (k, &i) in indices.iter().enumerate() {
                    for (d, v) in slot[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[k * c..(k + 1) * c])
                    {
                        *d += v;
                    }
                }
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(*a).numel()];
                self.accumulate(grads, *a, &ga);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = g[0] / labels.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * c + l] -= scale;
                }
                self.accumulate(grads, *logits, &gl);
            }
            Op::SquaredDistance { student, target } => {
                let b = self.value(*student).rows() as f64;
                let scale = 2.0 * g[0] / b;
                let gs = zip_map(self.value(*student).data(), target, |s, t| scale * (s - t));
                self.accumulate(grads, *student, &gs);
            }
            Op::AttendSparse {
                q,
                k,
                v,
                mask,
                probs,
            } => {
                let d = self.value(*q).cols();
                let (gq, gk, gv) = attention::sparse_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    d,
                    mask,
                    probs,
                    g,
                );
                self.accumulate(grads, *q, &gq);
                self.accumulate(grads, *k, &gk);
                self.accumulate(grads, *v, &gv);
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], var: Var) -> &'g mut Vec<f64> {
        let n = self.value(var).numel();
        grads[var.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contribution: &[f64]) {
        if !self.requires_grad(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution.to_vec()),
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Compares the tape gradient of `f` at `x` against central finite
/// differences and returns the largest
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.param(Tensor::from_parts(x.shape().to_vec(), x.data().to_vec()));
    let out = f(&mut tape, input)?;
    let analytic = tape.backward(out)?.tensor(input).into_data();

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_parts(x.shape().to_vec(), values));
        let out = f(&mut tape, v)?;
        let y = tape.value(out).item()?;
        if !y.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(y)
    };

    let mut worst = 0.0_f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.data().to_vec();
        plus[i] += step;
        let mut minus = x.data().to_vec();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[0.0, 0.0]]));
        let y = tape.softmax_rows(x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_single_allowed_position() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[5.0, 9.0]]));
        let mask = t(&[&[0.0, NEG_INF_SENTINEL]]);
        let y = tape.softmax_rows(x, Some(&mask)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_direct_evaluation() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 2.0, 3.0]]));
        let y = tape.softmax_rows(x, None).unwrap();
        let expected = [0.0900, 0.2447, 0.6652];
        for (got, want) in tape.value(y).data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let mask = t(&[&[0.0, 0.0], &[NEG_INF_SENTINEL, NEG_INF_SENTINEL]]);
        assert!(matches!(
            tape.softmax_rows(x, Some(&mask)),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn softmax_rejects_other_mask_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 2.0]]));
        let mask = t(&[&[0.0, -3.0]]);
        assert!(matches!(
            tape.softmax_rows(x, Some(&mask)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::filled(&[2, 3], 0.7));
        let s = tape.sum(x).unwrap();
        let grads = backward(s, &tape).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = backward(y, &tape).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn off_path_params_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::filled(&[1, 2], 1.0));
        let unused = tape.param(Tensor::filled(&[3, 1], 1.0));
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.tensor(unused).data(), &[0.0; 3]);
        let mut target = Tensor::filled(&[3, 1], 2.0);
        grads.write_into(unused, &mut target).unwrap();
        assert_eq!(target.grad().unwrap(), &[0.0; 3]);
    }

    #[test]
    fn grad_check_of_linear_function_is_exact() {
        let x = t(&[&[0.3, -0.2], &[0.9, 0.1]]);
        let err = grad_check(|tape, v| tape.sum(v), &x, 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn grad_check_of_squared_norm() {
        let x = t(&[&[1.0, 2.0, 3.0]]);
        let err = grad_check(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                tape.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_labels() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[&[0.0, 0.0]]));
        assert!(matches!(
            tape.cross_entropy(z, &[2]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn tape_is_append_only_and_topological() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::filled(&[2, 2], 0.5));
        let b = tape.matmul(a, a).unwrap();
        let c = tape.add(b, a).unwrap();
        assert!(a.index() < b.index() && b.index() < c.index());
        assert_eq!(tape.len(), 3);
    }
}
