use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::kernels::{self, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::Tensor;
use crate::error::{contract, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities available to feed-forward blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Swish,
    Relu,
    Sigmoid,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Act(Var, Activation),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Vec<(Var, Vec<usize>)>),
    GatherFlat(Var, Vec<Option<usize>>),
    Reshape(Var),
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Var,
    },
    TopKSoftmax {
        logits: Var,
        selected: Vec<Vec<usize>>,
    },
    Sum(Var),
    NllMean {
        logp: Var,
        targets: Vec<usize>,
    },
    Precomputed {
        input: Var,
        local_grad: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of operations for one forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a reverse sweep visits each node exactly once.
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<usize, Var>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape whose parameter bindings do not require gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|&v| self.rg(v));
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds an externally owned parameter as a leaf, once per key.
    pub fn bind_param(&mut self, key: usize, value: &Tensor) -> Result<Var> {
        if let Some(&v) = self.bound.get(&key) {
            return Ok(v);
        }
        let v = self.leaf(value.clone(), self.grad_enabled)?;
        self.bound.insert(key, v);
        Ok(v)
    }

    pub fn bound_param(&self, key: usize) -> Option<Var> {
        self.bound.get(&key).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !is_matrix(ta) {
            return Err(contract("transpose expects a matrix"));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let value = Tensor::new(vec![c, r], kernels::transpose(ta.data(), r, c))?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`n` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tx.cols();
        if tb.len() != n {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (v, bv) in row.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(x, b), &[x, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect())?;
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    /// Multiplies row `r` of `x[S×d]` by `s[r]`, with `s` of shape `[S, 1]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if !is_matrix(tx) || ts.len() != tx.rows() {
            return Err(shape_err("scale_rows", tx, ts));
        }
        let d = tx.cols();
        let mut data = tx.data().to_vec();
        for (r, row) in data.chunks_mut(d.max(1)).enumerate() {
            let c = ts.data()[r];
            row.iter_mut().for_each(|v| *v *= c);
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("scale_rows", value, Op::ScaleRows(x, s), &[x, s])
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        if n == 0 {
            return Err(contract("softmax over an empty axis"));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        if n == 0 {
            return Err(contract("log_softmax over an empty axis"));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("log_softmax", value, Op::LogSoftmax(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    ///
    /// A row whose entries are all equal normalizes to exact zeros.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.cols();
        if tg.len() != n || tb.len() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let constant = row.iter().all(|&v| v == row[0]);
            let var = if constant {
                0.0
            } else {
                row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64
            };
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = if constant { 0.0 } else { (row[j] - mean) * is };
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| match act {
                Activation::Relu => v.max(0.0),
                Activation::Sigmoid => kernels::sigmoid(v),
                Activation::Swish => v * kernels::sigmoid(v),
            })
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("activation", value, Op::Act(x, act), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let rows = first.rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if !is_matrix(t) || t.rows() != rows {
                return Err(shape_err("concat_cols", first, t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if !is_matrix(tx) || start > end || end > tx.rows() {
            return Err(contract(format!(
                "slice_rows {start}..{end} out of range for {:?}",
                tx.shape()
            )));
        }
        let value = tx.slice_rows(start, end);
        self.push("slice_rows", value, Op::SliceRows(x, start), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if !is_matrix(tx) || start > end || end > tx.cols() {
            return Err(contract(format!(
                "slice_cols {start}..{end} out of range for {:?}",
                tx.shape()
            )));
        }
        let rows = tx.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&tx.row(r)[start..end]);
        }
        let value = Tensor::new(vec![rows, end - start], data)?;
        self.push("slice_cols", value, Op::SliceCols(x, start), &[x])
    }

    /// Selects rows of a matrix; an empty index list yields a `0×d` matrix.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        let rows = tx.rows();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(contract(format!("gather_rows index {i} out of {rows}")));
            }
            data.extend_from_slice(tx.row(i));
        }
        let value = Tensor::new(vec![idx.len(), d], data)?;
        self.push("gather_rows", value, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    /// Sums each part's rows into the listed positions of a `rows × d` output.
    pub fn scatter_add_rows(&mut self, parts: &[(Var, Vec<usize>)], rows: usize, d: usize) -> Result<Var> {
        let mut out = vec![0.0; rows * d];
        for (p, idx) in parts {
            let tp = self.value(*p);
            if tp.rows() != idx.len() || (tp.cols() != d && !idx.is_empty()) {
                return Err(contract(format!(
                    "scatter_add_rows: part {:?} against {} indices",
                    tp.shape(),
                    idx.len()
                )));
            }
            for (i, &r) in idx.iter().enumerate() {
                if r >= rows {
                    return Err(contract(format!("scatter index {r} out of {rows}")));
                }
                for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(tp.row(i)) {
                    *o += v;
                }
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let inputs: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        self.push("scatter_add_rows", value, Op::ScatterAddRows(parts.to_vec()), &inputs)
    }

    /// Flat gather into a new shape; `None` entries read as zero.
    pub fn gather_flat(&mut self, x: Var, idx: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let mut data = Vec::with_capacity(idx.len());
        for i in &idx {
            data.push(match i {
                Some(i) => *tx
                    .data()
                    .get(*i)
                    .ok_or_else(|| contract(format!("gather_flat index {i} out of range")))?,
                None => 0.0,
            });
        }
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push("gather_flat", value, Op::GatherFlat(x, idx), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Valid depthwise convolution along rows.
    ///
    /// `x` is `[(T + K - 1) × d]` (left context already prepended), `w` is
    /// `[K × d]`, `b` is `[d]`; the result is `[T × d]`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let d = tx.cols();
        let k = tw.rows();
        if tw.cols() != d || tb.len() != d || tx.rows() + 1 < k {
            return Err(shape_err("depthwise_conv", tx, tw));
        }
        let t = tx.rows() + 1 - k;
        let mut out = vec![0.0; t * d];
        for r in 0..t {
            let o = &mut out[r * d..(r + 1) * d];
            o.copy_from_slice(tb.data());
            for j in 0..k {
                let xr = tx.row(r + j);
                let wr = tw.row(j);
                for c in 0..d {
                    o[c] += wr[c] * xr[c];
                }
            }
        }
        let value = Tensor::new(vec![t, d], out)?;
        self.push("depthwise_conv", value, Op::DepthwiseConv { x, w, b }, &[x, w, b])
    }

    /// Per-row top-`k` selection followed by softmax over the selected logits.
    ///
    /// Unselected entries are exactly zero. Ties go to the lowest index. The
    /// selection itself is a constant of the tape.
    pub fn topk_softmax(&mut self, logits: Var, k: usize) -> Result<Var> {
        let tl = self.value(logits);
        let n = tl.cols();
        if k == 0 || k > n {
            return Err(Error::Config(format!("top-k with k={k} over {n} experts")));
        }
        let rows = tl.rows();
        let mut out = vec![0.0; rows * n];
        let mut selected = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tl.row(r);
            let sel = top_k_indices(row, k);
            let m = sel.iter().map(|&i| row[i]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = sel.iter().map(|&i| (row[i] - m).exp()).sum();
            for &i in &sel {
                out[r * n + i] = (row[i] - m).exp() / s;
            }
            selected.push(sel);
        }
        let value = Tensor::new(tl.shape().to_vec(), out)?;
        self.push("topk_softmax", value, Op::TopKSoftmax { logits, selected }, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    /// Mean negative log-likelihood of `targets` under row-wise log-probs.
    pub fn nll_mean(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logp);
        let c = tl.cols();
        if tl.rows() != targets.len() || targets.is_empty() {
            return Err(contract(format!(
                "nll_mean: {} rows against {} targets",
                tl.rows(),
                targets.len()
            )));
        }
        let mut s = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(contract(format!("target {t} outside {c} classes")));
            }
            s -= tl.at(r, t);
        }
        let value = Tensor::scalar(s / targets.len() as f64);
        self.push(
            "nll_mean",
            value,
            Op::NllMean {
                logp,
                targets: targets.to_vec(),
            },
            &[logp],
        )
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to `input`.
    pub fn precomputed_scalar(&mut self, input: Var, value: f64, local_grad: Tensor) -> Result<Var> {
        if local_grad.shape() != self.shape(input) {
            return Err(shape_err("precomputed_scalar", self.value(input), &local_grad));
        }
        if !local_grad.is_finite() {
            return Err(Error::NonFinite {
                op: "precomputed_scalar",
            });
        }
        self.push(
            "precomputed_scalar",
            Tensor::scalar(value),
            Op::Precomputed { input, local_grad },
            &[input],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (&n.op, n.requires_grad) {
                (Op::Leaf, true) => {
                    Some(Tensor::new(n.value.shape().to_vec(), g.unwrap_or_else(|| vec![0.0; n.value.len()])).unwrap())
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(grads, *a, &mut |ga| matmul_bt_acc(g, tb.data(), ga, m, k, n));
                acc(grads, *b, &mut |gb| matmul_at_acc(ta.data(), g, gb, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let gt = kernels::transpose(g, r, c);
                acc(grads, *a, &mut |ga| add_into(ga, &gt));
            }
            Op::Add(a, b) => {
                acc(grads, *a, &mut |ga| add_into(ga, g));
                acc(grads, *b, &mut |gb| add_into(gb, g));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * tb[i];
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ta[i];
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(grads, *x, &mut |gx| add_into(gx, g));
                let n = self.value(*b).len();
                acc(grads, *b, &mut |gb| {
                    for row in g.chunks(n.max(1)) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(grads, *x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += c * g[i];
                }
            }),
            Op::ScaleRows(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let d = tx.cols().max(1);
                acc(grads, *x, &mut |gx| {
                    for (r, (gr, gxr)) in g.chunks(d).zip(gx.chunks_mut(d)).enumerate() {
                        let c = ts.data()[r];
                        for (o, v) in gxr.iter_mut().zip(gr) {
                            *o += c * v;
                        }
                    }
                });
                acc(grads, *s, &mut |gs| {
                    for (r, (gr, xr)) in g.chunks(d).zip(tx.data().chunks(d)).enumerate() {
                        gs[r] += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Softmax(x) => {
                let n = node.value.cols();
                acc(grads, *x, &mut |gx| {
                    for ((yr, gr), gxr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let n = node.value.cols();
                acc(grads, *x, &mut |gx| {
                    for ((yr, gr), gxr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            gxr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let tg = self.value(*gamma).data();
                acc(grads, *beta, &mut |gb| {
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                });
                acc(grads, *gamma, &mut |gg| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(grads, *x, &mut |gx| {
                    for (r, ((gr, hr), gxr)) in g.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                        let gh: Vec<f64> = (0..n).map(|j| gr[j] * tg[j]).collect();
                        let mean_gh = gh.iter().sum::<f64>() / n as f64;
                        let mean_ghh = gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gxr[j] += inv_std[r] * (gh[j] - mean_gh - hr[j] * mean_ghh);
                        }
                    }
                });
            }
            Op::Act(x, act) => {
                let tx = self.value(*x).data();
                acc(grads, *x, &mut |gx| {
                    for i in 0..gx.len() {
                        let d = match act {
                            Activation::Relu => {
                                if tx[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Sigmoid => y[i] * (1.0 - y[i]),
                            Activation::Swish => {
                                let s = kernels::sigmoid(tx[i]);
                                s + tx[i] * s * (1.0 - s)
                            }
                        };
                        gx[i] += g[i] * d;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    acc(grads, *p, &mut |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(grads, *p, &mut |gp| {
                        for (gpr, gr) in gp.chunks_mut(w.max(1)).zip(g.chunks(total)) {
                            add_into(gpr, &gr[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows(x, start) => {
                let d = node.value.cols();
                acc(grads, *x, &mut |gx| {
                    add_into(&mut gx[start * d..start * d + g.len()], g)
                });
            }
            Op::SliceCols(x, start) => {
                let w = node.value.cols();
                let full = self.value(*x).cols();
                acc(grads, *x, &mut |gx| {
                    for (gxr, gr) in gx.chunks_mut(full).zip(g.chunks(w.max(1))) {
                        add_into(&mut gxr[*start..start + w], gr);
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let d = node.value.cols();
                acc(grads, *x, &mut |gx| {
                    for (i, &r) in idx.iter().enumerate() {
                        add_into(&mut gx[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::ScatterAddRows(parts) => {
                let d = node.value.cols();
                for (p, idx) in parts {
                    acc(grads, *p, &mut |gp| {
                        for (i, &r) in idx.iter().enumerate() {
                            add_into(&mut gp[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    });
                }
            }
            Op::GatherFlat(x, idx) => acc(grads, *x, &mut |gx| {
                for (i, src) in idx.iter().enumerate() {
                    if let Some(s) = src {
                        gx[*s] += g[i];
                    }
                }
            }),
            Op::Reshape(x) => acc(grads, *x, &mut |gx| add_into(gx, g)),
            Op::DepthwiseConv { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let d = tx.cols();
                let k = tw.rows();
                let t = node.value.rows();
                acc(grads, *b, &mut |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
                acc(grads, *w, &mut |gw| {
                    for r in 0..t {
                        for j in 0..k {
                            for c in 0..d {
                                gw[j * d + c] += g[r * d + c] * tx.data()[(r + j) * d + c];
                            }
                        }
                    }
                });
                acc(grads, *x, &mut |gx| {
                    for r in 0..t {
                        for j in 0..k {
                            for c in 0..d {
                                gx[(r + j) * d + c] += g[r * d + c] * tw.data()[j * d + c];
                            }
                        }
                    }
                });
            }
            Op::TopKSoftmax { logits, selected } => {
                let n = node.value.cols();
                acc(grads, *logits, &mut |gl| {
                    for (r, sel) in selected.iter().enumerate() {
                        let dot: f64 = sel.iter().map(|&i| y[r * n + i] * g[r * n + i]).sum();
                        for &i in sel {
                            gl[r * n + i] += y[r * n + i] * (g[r * n + i] - dot);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(grads, *x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::NllMean { logp, targets } => {
                let c = self.value(*logp).cols();
                let scale = g[0] / targets.len() as f64;
                acc(grads, *logp, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * c + t] -= scale;
                    }
                });
            }
            Op::Precomputed { input, local_grad } => acc(grads, *input, &mut |gi| {
                for (o, v) in gi.iter_mut().zip(local_grad.data()) {
                    *o += g[0] * v;
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Indices of the `k` largest entries; ties resolve to the lowest index.
pub(crate) fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Gradients of leaf nodes that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf; `None` for non-leaves and leaves without `requires_grad`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
