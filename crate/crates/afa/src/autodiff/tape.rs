//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Nodes are appended in evaluation order, so the append order is a
//! topological order and the backward pass is a single reverse sweep that
//! visits each node exactly once, accumulating (never overwriting) gradients.

use crate::autodiff::kernels::{mm_nn, mm_nt, mm_tn};
use crate::autodiff::tensor::Tensor;
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Add(usize, usize),
    /// matrix + row-broadcast vector
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    /// a * b^T
    MatMulNT(usize, usize),
    Gelu(usize),
    Tanh(usize),
    Relu(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Tensor, inv_std: Vec<f64> },
    MaskedSoftmax { x: usize, mask: Tensor },
    MaskedLogSoftmax { x: usize, mask: Tensor, probs: Tensor },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Tensor },
    GaussianNll { mean: usize, log_var: usize, y: Tensor },
    GatherRows { x: usize, indices: Vec<usize>, in_rows: usize },
    SliceCols { x: usize, start: usize, in_cols: usize },
    ConcatCols { parts: Vec<usize>, widths: Vec<usize> },
    PlaceRows { rows: Vec<(usize, usize)> },
    StraightThrough { soft: usize },
    MeanAll(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

/// Computation tape. Single-threaded; replicate one per worker for
/// data-parallel training and reduce gradients outside.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated at `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Input, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, grad: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = self.op_requires_grad(&op);
        Ok(self.push(op, value, requires_grad))
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let dep = |i: &usize| self.nodes[*i].requires_grad;
        match op {
            Op::Input => false,
            Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::MatMulNT(a, b) => {
                dep(a) || dep(b)
            }
            Op::Scale(a, _) | Op::Gelu(a) | Op::Tanh(a) | Op::Relu(a) | Op::MeanAll(a) => dep(a),
            Op::LayerNorm { x, gain, bias, .. } => dep(x) || dep(gain) || dep(bias),
            Op::MaskedSoftmax { x, .. } | Op::MaskedLogSoftmax { x, .. } => dep(x),
            Op::CrossEntropy { logits, .. } => dep(logits),
            Op::GaussianNll { mean, log_var, .. } => dep(mean) || dep(log_var),
            Op::GatherRows { x, .. } | Op::SliceCols { x, .. } => dep(x),
            Op::ConcatCols { parts, .. } => parts.iter().any(dep),
            Op::PlaceRows { rows } => rows.iter().any(|(_, v)| dep(v)),
            Op::StraightThrough { soft } => dep(soft),
        }
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::Shape { op, detail }
    }

    // ---- elementwise and linear ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        self.push_checked(Op::Add(a.0, b.0), out, "add")
    }

    /// `m + bias` where `bias` broadcasts over the rows of `m`.
    pub fn add_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.nodes[m.0].value.last_dim_rows()?;
        let tb = &self.nodes[bias.0].value;
        if tb.shape() != [cols] {
            return Err(Self::shape_err("add_bias", format!("bias {:?} vs cols {}", tb.shape(), cols)));
        }
        let mut out = self.nodes[m.0].value.clone();
        for i in 0..rows {
            let row = &mut out.data_mut()[i * cols..(i + 1) * cols];
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push_checked(Op::AddBias(m.0, bias.0), out, "add_bias")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_checked(Op::Mul(a.0, b.0), out, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|v| v * c);
        self.push_checked(Op::Scale(a.0, c), out, "scale")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(Self::shape_err("matmul", format!("inner dims {} vs {}", k, k2)));
        }
        let mut out = Tensor::zeros(&[m, n]);
        mm_nn(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), out.data_mut(), m, k, n);
        self.push_checked(Op::MatMul(a.0, b.0), out, "matmul")
    }

    /// `a * b^T` for `a: [m x k]`, `b: [n x k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2(a, "matmul_nt")?;
        let (n, k2) = self.rank2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Self::shape_err("matmul_nt", format!("inner dims {} vs {}", k, k2)));
        }
        let mut out = Tensor::zeros(&[m, n]);
        mm_nt(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), out.data_mut(), m, k, n);
        self.push_checked(Op::MatMulNT(a.0, b.0), out, "matmul_nt")
    }

    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.nodes[v.0].value.shape();
        if s.len() != 2 {
            return Err(Self::shape_err(op, format!("expected rank 2, got {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    // ---- activations ----

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(gelu);
        self.push_checked(Op::Gelu(a.0), out, "gelu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(f64::tanh);
        self.push_checked(Op::Tanh(a.0), out, "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|v| v.max(0.0));
        self.push_checked(Op::Relu(a.0), out, "relu")
    }

    // ---- normalization ----

    /// Per-row standardization (population variance, epsilon inside the
    /// square root) followed by a learned affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.nodes[x.0].value.last_dim_rows()?;
        if cols == 0 {
            return Err(Self::shape_err("layer_norm", "zero-width rows".into()));
        }
        for (v, name) in [(gain, "gain"), (bias, "bias")] {
            if self.nodes[v.0].value.shape() != [cols] {
                return Err(Self::shape_err("layer_norm", format!("{name} width mismatch")));
            }
        }
        let tx = &self.nodes[x.0].value;
        let g = self.nodes[gain.0].value.data().to_vec();
        let b = self.nodes[bias.0].value.data().to_vec();
        let mut xhat = Tensor::zeros(tx.shape());
        let mut inv_std = vec![0.0; rows];
        let mut out = Tensor::zeros(tx.shape());
        for i in 0..rows {
            let row = &tx.data()[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..cols {
                let xh = (row[j] - mean) * is;
                xhat.data_mut()[i * cols + j] = xh;
                out.data_mut()[i * cols + j] = g[j] * xh + b[j];
            }
        }
        self.push_checked(
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, inv_std },
            out,
            "layer_norm",
        )
    }

    // ---- softmax family ----

    /// Row-wise softmax over unmasked entries; masked entries are exactly 0
    /// in both the output and its gradient. Errors on a fully masked row.
    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.shape() != mask.shape() {
            return Err(Self::shape_err("masked_softmax", "mask shape mismatch".into()));
        }
        let (rows, cols) = tx.last_dim_rows()?;
        let mut out = Tensor::zeros(tx.shape());
        for i in 0..rows {
            let xr = &tx.data()[i * cols..(i + 1) * cols];
            let mr = &mask.data()[i * cols..(i + 1) * cols];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..cols {
                if mr[j] != 0.0 && xr[j] > mx {
                    mx = xr[j];
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedRow { op: "masked_softmax", row: i });
            }
            let mut z = 0.0;
            let orow = &mut out.data_mut()[i * cols..(i + 1) * cols];
            for j in 0..cols {
                if mr[j] != 0.0 {
                    let e = (xr[j] - mx).exp();
                    orow[j] = e;
                    z += e;
                }
            }
            for j in 0..cols {
                orow[j] /= z;
            }
        }
        self.push_checked(Op::MaskedSoftmax { x: x.0, mask: mask.clone() }, out, "masked_softmax")
    }

    /// Row-wise log-softmax over unmasked entries (masked positions hold 0
    /// and carry zero gradient; downstream masked ops must ignore them).
    pub fn masked_log_softmax(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.shape() != mask.shape() {
            return Err(Self::shape_err("masked_log_softmax", "mask shape mismatch".into()));
        }
        let (rows, cols) = tx.last_dim_rows()?;
        let mut out = Tensor::zeros(tx.shape());
        let mut probs = Tensor::zeros(tx.shape());
        for i in 0..rows {
            let xr = &tx.data()[i * cols..(i + 1) * cols];
            let mr = &mask.data()[i * cols..(i + 1) * cols];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..cols {
                if mr[j] != 0.0 && xr[j] > mx {
                    mx = xr[j];
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedRow { op: "masked_log_softmax", row: i });
            }
            let mut z = 0.0;
            for j in 0..cols {
                if mr[j] != 0.0 {
                    z += (xr[j] - mx).exp();
                }
            }
            let lse = mx + z.ln();
            for j in 0..cols {
                if mr[j] != 0.0 {
                    let lj = xr[j] - lse;
                    out.data_mut()[i * cols + j] = lj;
                    probs.data_mut()[i * cols + j] = lj.exp();
                }
            }
        }
        self.push_checked(
            Op::MaskedLogSoftmax { x: x.0, mask: mask.clone(), probs },
            out,
            "masked_log_softmax",
        )
    }

    // ---- losses ----

    /// Mean negative log likelihood of integer class targets under
    /// softmax(logits), computed with a fused log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.rank2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Self::shape_err("cross_entropy", format!("{} targets for {} rows", targets.len(), n)));
        }
        let tx = &self.nodes[logits.0].value;
        let mut probs = Tensor::zeros(&[n, c]);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::InvalidTarget { index: t, classes: c });
            }
            let row = &tx.data()[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &v in row {
                z += (v - mx).exp();
            }
            let lse = mx + z.ln();
            total += lse - row[t];
            for j in 0..c {
                probs.data_mut()[i * c + j] = (row[j] - lse).exp();
            }
        }
        let out = Tensor::scalar(total / n as f64);
        self.push_checked(
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs },
            out,
            "cross_entropy",
        )
    }

    /// Mean of `0.5 * (log 2pi + log_var + (y - mean)^2 * exp(-log_var))`.
    pub fn gaussian_nll(&mut self, mean: Var, log_var: Var, y: &Tensor) -> Result<Var> {
        let tm = &self.nodes[mean.0].value;
        let tv = &self.nodes[log_var.0].value;
        if tm.shape() != tv.shape() || tm.shape() != y.shape() {
            return Err(Self::shape_err(
                "gaussian_nll",
                format!("{:?} / {:?} / {:?}", tm.shape(), tv.shape(), y.shape()),
            ));
        }
        let n = tm.len();
        let mut total = 0.0;
        for i in 0..n {
            let r = y.data()[i] - tm.data()[i];
            let lv = tv.data()[i];
            total += 0.5 * (LN_2PI + lv + r * r * (-lv).exp());
        }
        let out = Tensor::scalar(total / n as f64);
        self.push_checked(
            Op::GaussianNll { mean: mean.0, log_var: log_var.0, y: y.clone() },
            out,
            "gaussian_nll",
        )
    }

    // ---- data movement ----

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rank2(x, "gather_rows")?;
        let tx = &self.nodes[x.0].value;
        let mut out = Tensor::zeros(&[indices.len(), cols]);
        for (oi, &ri) in indices.iter().enumerate() {
            if ri >= rows {
                return Err(Self::shape_err("gather_rows", format!("row {} out of {}", ri, rows)));
            }
            out.data_mut()[oi * cols..(oi + 1) * cols].copy_from_slice(tx.row(ri));
        }
        self.push_checked(Op::GatherRows { x: x.0, indices: indices.to_vec(), in_rows: rows }, out, "gather_rows")
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.rank2(x, "slice_cols")?;
        if start >= end || end > cols {
            return Err(Self::shape_err("slice_cols", format!("[{start}, {end}) of {cols}")));
        }
        let tx = &self.nodes[x.0].value;
        let w = end - start;
        let mut out = Tensor::zeros(&[rows, w]);
        for i in 0..rows {
            out.data_mut()[i * w..(i + 1) * w].copy_from_slice(&tx.row(i)[start..end]);
        }
        self.push_checked(Op::SliceCols { x: x.0, start, in_cols: cols }, out, "slice_cols")
    }

    /// Concatenates rank-1 tensors into one vector.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut widths = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape().len() != 1 {
                return Err(Self::shape_err("concat_cols", format!("expected rank 1, got {:?}", t.shape())));
            }
            widths.push(t.len());
            data.extend_from_slice(t.data());
        }
        let out = Tensor::vector(&data);
        self.push_checked(
            Op::ConcatCols { parts: parts.iter().map(|v| v.0).collect(), widths },
            out,
            "concat_cols",
        )
    }

    /// A `[rows x cols]` tensor that is zero except at the given rows, each
    /// filled from a rank-1 node of width `cols`.
    pub fn place_rows(&mut self, rows: usize, cols: usize, entries: &[(usize, Var)]) -> Result<Var> {
        let mut out = Tensor::zeros(&[rows, cols]);
        for &(ri, v) in entries {
            let t = &self.nodes[v.0].value;
            if t.shape() != [cols] {
                return Err(Self::shape_err("place_rows", format!("row width {:?} vs {cols}", t.shape())));
            }
            if ri >= rows {
                return Err(Self::shape_err("place_rows", format!("row {ri} out of {rows}")));
            }
            out.data_mut()[ri * cols..(ri + 1) * cols].copy_from_slice(t.data());
        }
        self.push_checked(
            Op::PlaceRows { rows: entries.iter().map(|&(r, v)| (r, v.0)).collect() },
            out,
            "place_rows",
        )
    }

    /// Forward takes the value of `hard`; backward routes the incoming
    /// gradient to `soft` unchanged (the straight-through estimator).
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if self.nodes[soft.0].value.shape() != hard.shape() {
            return Err(Self::shape_err("straight_through", "hard/soft shape mismatch".into()));
        }
        self.push_checked(Op::StraightThrough { soft: soft.0 }, hard, "straight_through")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let n = t.len().max(1);
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / n as f64);
        self.push_checked(Op::MeanAll(x.0), out, "mean_all")
    }

    // ---- backward ----

    /// Runs the reverse sweep from a scalar root. Gradients accumulate into
    /// every node with `requires_grad`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Self::shape_err("backward", "root must be scalar".into()));
        }
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        self.nodes[root.0].grad = Some(Tensor::full(&root_shape, 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            self.propagate(i, &g)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accum(nodes: &mut [Node], idx: usize, delta: Tensor) {
        let node = &mut nodes[idx];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<()> {
        let (head, tail) = self.nodes.split_at_mut(i);
        let node = &tail[0];
        match &node.op {
            Op::Input => {}
            Op::Add(a, b) => {
                Self::accum(head, *a, g.clone());
                Self::accum(head, *b, g.clone());
            }
            Op::AddBias(m, bias) => {
                Self::accum(head, *m, g.clone());
                let (rows, cols) = g.last_dim_rows()?;
                let mut db = Tensor::zeros(&[cols]);
                for r in 0..rows {
                    for (d, v) in db.data_mut().iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                        *d += v;
                    }
                }
                Self::accum(head, *bias, db);
            }
            Op::Mul(a, b) => {
                let da = {
                    let tb = &head[*b].value;
                    let data = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    Tensor::new(g.shape().to_vec(), data)?
                };
                let db = {
                    let ta = &head[*a].value;
                    let data = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    Tensor::new(g.shape().to_vec(), data)?
                };
                Self::accum(head, *a, da);
                Self::accum(head, *b, db);
            }
            Op::Scale(a, c) => {
                Self::accum(head, *a, g.map(|v| v * c));
            }
            Op::MatMul(a, b) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let k = head[*a].value.shape()[1];
                let mut da = Tensor::zeros(&[m, k]);
                mm_nt(g.data(), head[*b].value.data(), da.data_mut(), m, n, k);
                let mut db = Tensor::zeros(&[k, n]);
                mm_tn(head[*a].value.data(), g.data(), db.data_mut(), k, m, n);
                Self::accum(head, *a, da);
                Self::accum(head, *b, db);
            }
            Op::MatMulNT(a, b) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let k = head[*a].value.shape()[1];
                let mut da = Tensor::zeros(&[m, k]);
                mm_nn(g.data(), head[*b].value.data(), da.data_mut(), m, n, k);
                let mut db = Tensor::zeros(&[n, k]);
                mm_tn(g.data(), head[*a].value.data(), db.data_mut(), n, m, k);
                Self::accum(head, *a, da);
                Self::accum(head, *b, db);
            }
            Op::Gelu(a) => {
                let tx = &head[*a].value;
                let data = g.data().iter().zip(tx.data()).map(|(gv, &x)| gv * gelu_deriv(x)).collect();
                Self::accum(head, *a, Tensor::new(tx.shape().to_vec(), data)?);
            }
            Op::Tanh(a) => {
                let ty = &node.value;
                let data = g.data().iter().zip(ty.data()).map(|(gv, &y)| gv * (1.0 - y * y)).collect();
                Self::accum(head, *a, Tensor::new(ty.shape().to_vec(), data)?);
            }
            Op::Relu(a) => {
                let tx = &head[*a].value;
                let data = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                Self::accum(head, *a, Tensor::new(tx.shape().to_vec(), data)?);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (rows, cols) = g.last_dim_rows()?;
                let gvals = head[*gain].value.data().to_vec();
                let mut dgain = Tensor::zeros(&[cols]);
                let mut dbias = Tensor::zeros(&[cols]);
                let mut dx = Tensor::zeros(g.shape());
                for r in 0..rows {
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    let xh = &xhat.data()[r * cols..(r + 1) * cols];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..cols {
                        dgain.data_mut()[j] += grow[j] * xh[j];
                        dbias.data_mut()[j] += grow[j];
                        let dxh = grow[j] * gvals[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= cols as f64;
                    mean_dxh_xh /= cols as f64;
                    for j in 0..cols {
                        let dxh = grow[j] * gvals[j];
                        dx.data_mut()[r * cols + j] = inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                Self::accum(head, *x, dx);
                Self::accum(head, *gain, dgain);
                Self::accum(head, *bias, dbias);
            }
            Op::MaskedSoftmax { x, mask } => {
                let y = &node.value;
                let (rows, cols) = y.last_dim_rows()?;
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let mr = &mask.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        if mr[j] != 0.0 {
                            dx.data_mut()[r * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Self::accum(head, *x, dx);
            }
            Op::MaskedLogSoftmax { x, mask, probs } => {
                let (rows, cols) = g.last_dim_rows()?;
                let mut dx = Tensor::zeros(g.shape());
                for r in 0..rows {
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let pr = &probs.data()[r * cols..(r + 1) * cols];
                    let mr = &mask.data()[r * cols..(r + 1) * cols];
                    let gsum: f64 = (0..cols).filter(|&j| mr[j] != 0.0).map(|j| gr[j]).sum();
                    for j in 0..cols {
                        if mr[j] != 0.0 {
                            dx.data_mut()[r * cols + j] = gr[j] - pr[j] * gsum;
                        }
                    }
                }
                Self::accum(head, *x, dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let gs = g.value();
                let (n, c) = probs.last_dim_rows()?;
                let mut dl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dl.data_mut()[i * c + t] -= 1.0;
                }
                let scale = gs / n as f64;
                for v in dl.data_mut() {
                    *v *= scale;
                }
                Self::accum(head, *logits, dl);
            }
            Op::GaussianNll { mean, log_var, y } => {
                let gs = g.value();
                let tm = &head[*mean].value;
                let tv = &head[*log_var].value;
                let n = tm.len() as f64;
                let mut dm = Tensor::zeros(tm.shape());
                let mut dv = Tensor::zeros(tv.shape());
                for i in 0..tm.len() {
                    let r = y.data()[i] - tm.data()[i];
                    let e = (-tv.data()[i]).exp();
                    dm.data_mut()[i] = gs * (-r) * e / n;
                    dv.data_mut()[i] = gs * 0.5 * (1.0 - r * r * e) / n;
                }
                Self::accum(head, *mean, dm);
                Self::accum(head, *log_var, dv);
            }
            Op::GatherRows { x, indices, in_rows } => {
                let cols = g.shape()[1];
                let mut dx = Tensor::zeros(&[*in_rows, cols]);
                for (oi, &ri) in indices.iter().enumerate() {
                    let src = &g.data()[oi * cols..(oi + 1) * cols];
                    let dst = &mut dx.data_mut()[ri * cols..(ri + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                Self::accum(head, *x, dx);
            }
            Op::SliceCols { x, start, in_cols } => {
                let (rows, w) = g.last_dim_rows()?;
                let mut dx = Tensor::zeros(&[rows, *in_cols]);
                for r in 0..rows {
                    dx.data_mut()[r * in_cols + start..r * in_cols + start + w]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                Self::accum(head, *x, dx);
            }
            Op::ConcatCols { parts, widths } => {
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    let dg = Tensor::vector(&g.data()[off..off + w]);
                    Self::accum(head, p, dg);
                    off += w;
                }
            }
            Op::PlaceRows { rows } => {
                let cols = g.shape()[1];
                for &(ri, v) in rows {
                    let dg = Tensor::vector(&g.data()[ri * cols..(ri + 1) * cols]);
                    Self::accum(head, v, dg);
                }
            }
            Op::StraightThrough { soft } => {
                Self::accum(head, *soft, g.clone());
            }
            Op::MeanAll(a) => {
                let tx = &head[*a].value;
                let gs = g.value() / tx.len().max(1) as f64;
                Self::accum(head, *a, Tensor::full(tx.shape(), gs));
            }
        }
        Ok(())
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn masked_softmax_uniform_and_single_entry() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
        let y = tape.masked_softmax(x, &Tensor::full(&[1, 4], 1.0)).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let x = tape.constant(Tensor::matrix(1, 2, vec![5.0, 0.0]).unwrap());
        let y = tape.masked_softmax(x, &Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0]);
    }

    #[test]
    fn masked_softmax_matches_high_precision_reference() {
        // Direct evaluation with explicit normalization, no max subtraction.
        let logits = [1.0_f64, 2.0, 3.0];
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        let expect: Vec<f64> = logits.iter().map(|v| v.exp() / z).collect();

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, logits.to_vec()).unwrap());
        let y = tape.masked_softmax(x, &Tensor::full(&[1, 3], 1.0)).unwrap();
        let got = tape.value(y).data();
        let sum: f64 = got.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_errors_on_fully_masked_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let err = tape.masked_softmax(x, &Tensor::zeros(&[1, 3])).unwrap_err();
        assert!(matches!(err, Error::FullyMaskedRow { .. }));
    }

    #[test]
    fn layer_norm_constant_and_symmetric_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![4.2, 4.2, 4.2]).unwrap());
        let g = tape.constant(Tensor::vector(&[1.0, 1.0, 1.0]));
        let b = tape.constant(Tensor::vector(&[0.0, 0.0, 0.0]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-12);
        }

        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let g = tape.constant(Tensor::vector(&[1.0, 1.0]));
        let b = tape.constant(Tensor::vector(&[0.0, 0.0]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let got = tape.value(y).data();
        assert!((got[0] - 1.0).abs() < 1e-5);
        assert!((got[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let loss = tape.cross_entropy(l, &[0]).unwrap();
        assert!((tape.value(loss).value() - 2.0_f64.ln()).abs() < 1e-12);

        let l = tape.constant(Tensor::matrix(1, 2, vec![30.0, -30.0]).unwrap());
        let loss = tape.cross_entropy(l, &[0]).unwrap();
        assert!(tape.value(loss).value() < 1e-12);
        assert!(tape.value(loss).value() >= 0.0);
    }

    #[test]
    fn cross_entropy_matches_direct_evaluation() {
        let logits: Vec<f64> =
            vec![0.3, -1.2, 0.7, 2.0, -0.4, 0.1, -1.5, 0.9, 0.2, 1.1, -0.6, 0.5, 0.0, -2.0, 1.4];
        let targets = [2usize, 0, 1, 2, 0];
        // direct: mean of -log(exp(l_t) / sum exp(l_j))
        let mut direct = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &logits[i * 3..(i + 1) * 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            direct += -(row[t].exp() / z).ln();
        }
        direct /= targets.len() as f64;

        let mut tape = Tape::new();
        let l = tape.constant(Tensor::matrix(5, 3, logits).unwrap());
        let loss = tape.cross_entropy(l, &targets).unwrap();
        assert!((tape.value(loss).value() - direct).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(matches!(tape.cross_entropy(l, &[2]), Err(Error::InvalidTarget { .. })));
    }

    #[test]
    fn gaussian_nll_hand_values() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::vector(&[1.5]));
        let v = tape.constant(Tensor::vector(&[0.0]));
        let loss = tape.gaussian_nll(m, v, &Tensor::vector(&[1.5])).unwrap();
        assert!((tape.value(loss).value() - 0.9189385332046727).abs() < 1e-12);

        let m = tape.constant(Tensor::vector(&[0.0]));
        let v = tape.constant(Tensor::vector(&[0.0]));
        let loss = tape.gaussian_nll(m, v, &Tensor::vector(&[1.0])).unwrap();
        assert!((tape.value(loss).value() - 1.4189385332046727).abs() < 1e-12);
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0), true);
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().value(), 2.0);
    }

    #[test]
    fn straight_through_passes_gradient_to_soft_path() {
        let mut tape = Tape::new();
        let soft = tape.input(Tensor::vector(&[0.6, 0.4]), true);
        let hard = tape.straight_through(soft, Tensor::vector(&[1.0, 0.0])).unwrap();
        assert_eq!(tape.value(hard).data(), &[1.0, 0.0]);
        let w = tape.constant(Tensor::vector(&[2.0, 5.0]));
        let prod = tape.mul(hard, w).unwrap();
        let loss = tape.mean_all(prod).unwrap();
        // forward uses hard values: (2*1 + 5*0)/2 = 1
        assert_eq!(tape.value(loss).value(), 1.0);
        tape.backward(loss).unwrap();
        // backward behaves as if the soft vector were used
        let g = tape.grad(soft).unwrap().data();
        assert_eq!(g, &[1.0, 2.5]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[1e308]));
        let y = tape.scale(x, 10.0);
        assert!(matches!(y, Err(Error::NonFinite { .. })));
    }
}
