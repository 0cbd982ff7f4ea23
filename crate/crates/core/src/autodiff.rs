//! Reverse-mode differentiation over a dynamic tape.
//!
//! Every operation appends a node holding its output value. A node records
//! its inputs only when at least one of them requires a gradient; nodes built
//! purely from frozen values are stored as constants, so frozen forward passes
//! carry no graph and [`Tape::backward`] can never reach them.

use crate::error::{Error, Result};
use crate::tensor::{gemm, transpose, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Gelu(Var),
    SumAll(Var),
    MeanAll(Var),
    ReduceAxis {
        x: Var,
        axis: usize,
        factor: f64,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Nll {
        x: Var,
        labels: Vec<usize>,
    },
    Gather {
        x: Var,
        /// `indices[j * n + b]` is the source position of output row `j`, batch `b`.
        indices: Vec<usize>,
    },
    Broadcast {
        x: Var,
        n: usize,
    },
    IndexRows {
        table: Var,
        ids: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// Drops every recorded node and all gradient state.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x[..., d] + bias[d]`, broadcasting the bias over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rank() != 1 || tx.last_dim() != tb.len() {
            return Err(Error::dim("add_bias", tx.shape(), tb.shape()));
        }
        let d = tb.len();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu(v).0);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::MeanAll(x), &[x])
    }

    pub fn sum_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, extent, inner) = split_axis(shape, axis);
        let factor = if mean { 1.0 / extent as f64 } else { 1.0 };
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &t.data()[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= factor);
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push(out, Op::ReduceAxis { x, axis, factor }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Positions `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Bounds {
                op: "slice",
                start,
                end: start + len,
                extent: shape.get(axis).copied().unwrap_or(0),
            });
        }
        let (outer, extent, inner) = split_axis(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * extent + start) * inner;
            data.extend_from_slice(&t.data()[from..from + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = vec![false; t.rank()];
        if perm.len() != t.rank() || perm.iter().any(|&p| p >= t.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract(format!(
                "invalid permutation {perm:?} for shape {:?}",
                t.shape()
            )));
        }
        let out = permute_tensor(t, perm);
        Ok(self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// `a[..., k] · b[k, n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() < 2 || tb.rank() != 2 || ta.last_dim() != tb.shape()[0] {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let k = ta.last_dim();
        let n = tb.shape()[1];
        let m = ta.len() / k;
        let mut data = vec![0.0; m * n];
        gemm(ta.data(), tb.data(), &mut data, m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Per-batch product of `a[B, m, k]` with `b[B, k, n]`, or with the
    /// transpose of `b[B, n, k]` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bad = || Error::dim("batch_matmul", ta.shape(), tb.shape());
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(bad());
        }
        let mut data = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ab = &ta.data()[i * m * k..(i + 1) * m * k];
            let bb = &tb.data()[i * k * n..(i + 1) * k * n];
            let out = &mut data[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm(ab, &transpose(bb, n, k), out, m, k, n);
            } else {
                gemm(ab, bb, out, m, k, n);
            }
        }
        let out = Tensor::from_parts(vec![batch, m, n], data);
        Ok(self.push(out, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Softmax over the last axis where position `j > i` of row `i` in each
    /// trailing square block is masked out.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let t = self.value(x);
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let n = t.last_dim();
        if causal && (t.rank() < 2 || t.shape()[t.rank() - 2] != n) {
            return Err(Error::Contract(format!(
                "causal softmax needs square trailing block, got {:?}",
                t.shape()
            )));
        }
        let mut data = t.data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            let visible = if causal { r % n + 1 } else { n };
            softmax_in_place(&mut row[..visible]);
            row[visible..].iter_mut().for_each(|v| *v = 0.0);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.all_finite() {
            return Err(Error::Numeric("log_softmax input is not finite".into()));
        }
        let n = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(out, Op::LogSoftmax(x), &[x]))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (t, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let d = t.last_dim();
        if g.shape() != [d] {
            return Err(Error::dim("layer_norm", t.shape(), g.shape()));
        }
        if b.shape() != [d] {
            return Err(Error::dim("layer_norm", t.shape(), b.shape()));
        }
        let rows = t.len() / d;
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; t.len()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                data[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Scales each last-axis row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.len() / d);
        for row in data.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::L2Normalize { x, norms }, &[x])
    }

    /// `-mean_b x[b, labels[b]]` for a `[B, C]` matrix of log-probabilities.
    pub fn nll(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::dim("nll", t.shape(), &[labels.len()]));
        }
        let c = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
        }
        let total: f64 = labels.iter().enumerate().map(|(b, &y)| t.data()[b * c + y]).sum();
        let out = Tensor::scalar(-total / labels.len() as f64);
        Ok(self.push(
            out,
            Op::Nll {
                x,
                labels: labels.to_vec(),
            },
            &[x],
        ))
    }

    /// Picks rows from `x[L, N, d]` per batch element. `rows[b]` lists the
    /// source positions for batch element `b`; every list must have the same
    /// length `k`, giving an output of shape `[k, N, d]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 3 || rows.len() != t.shape()[1] {
            return Err(Error::dim("gather_rows", t.shape(), &[rows.len()]));
        }
        let (len, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let k = rows.first().map_or(0, Vec::len);
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Contract("gather_rows needs equal, non-empty index lists".into()));
        }
        let mut indices = vec![0; k * n];
        let mut data = Vec::with_capacity(k * n * d);
        for j in 0..k {
            for (b, r) in rows.iter().enumerate() {
                let src = r[j];
                if src >= len {
                    return Err(Error::Bounds {
                        op: "gather_rows",
                        start: src,
                        end: src + 1,
                        extent: len,
                    });
                }
                indices[j * n + b] = src;
                let off = (src * n + b) * d;
                data.extend_from_slice(&t.data()[off..off + d]);
            }
        }
        let out = Tensor::from_parts(vec![k, n, d], data);
        Ok(self.push(out, Op::Gather { x, indices }, &[x]))
    }

    /// Repeats `x[L, d]` across a new middle batch axis: `[L, n, d]`.
    pub fn broadcast_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || n == 0 {
            return Err(Error::dim("broadcast_batch", t.shape(), &[n]));
        }
        let (len, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(len * n * d);
        for i in 0..len {
            for _ in 0..n {
                data.extend_from_slice(t.row(i));
            }
        }
        let out = Tensor::from_parts(vec![len, n, d], data);
        Ok(self.push(out, Op::Broadcast { x, n }, &[x]))
    }

    /// Embedding lookup: rows `ids` of `table[V, d]`, giving `[ids.len(), d]`.
    pub fn index_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || ids.is_empty() {
            return Err(Error::dim("index_rows", t.shape(), &[ids.len()]));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Bounds {
                    op: "index_rows",
                    start: id,
                    end: id + 1,
                    extent: v,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        Ok(self.push(
            out,
            Op::IndexRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Populates gradients of the scalar `loss` for every reachable node that
    /// requires one. Nodes that do not require a gradient never receive one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.adjoint(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn adjoint(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: Tensor| {
            if self.nodes[v.0].requires_grad {
                match &mut grads[v.0] {
                    Some(existing) => existing.accumulate(&delta),
                    slot @ None => *slot = Some(delta),
                }
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, zip(g, val(*b), |x, y| x * y));
                acc(*b, zip(g, val(*a), |x, y| x * y));
            }
            Op::AddBias(x, bias) => {
                acc(*x, g.clone());
                let d = val(*bias).len();
                let mut db = vec![0.0; d];
                for row in g.data().chunks(d) {
                    db.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                acc(*bias, Tensor::from_parts(vec![d], db));
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::Square(x) => acc(*x, zip(g, val(*x), |gv, xv| 2.0 * xv * gv)),
            Op::Gelu(x) => acc(*x, zip(g, val(*x), |gv, xv| gv * gelu(xv).1)),
            Op::SumAll(x) => acc(*x, Tensor::full(val(*x).shape(), g.item())),
            Op::MeanAll(x) => {
                let t = val(*x);
                acc(*x, Tensor::full(t.shape(), g.item() / t.len() as f64));
            }
            Op::ReduceAxis { x, axis, factor } => {
                let shape = val(*x).shape();
                let (outer, extent, inner) = split_axis(shape, *axis);
                let mut data = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for e in 0..extent {
                        let dst = &mut data[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * factor);
                    }
                }
                acc(*x, Tensor::from_parts(shape.to_vec(), data));
            }
            Op::Concat { parts, axis } => {
                let out_shape = g.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape();
                    let ext = ps[*axis];
                    let mut data = Vec::with_capacity(val(p).len());
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[from..from + ext * inner]);
                    }
                    acc(p, Tensor::from_parts(ps.to_vec(), data));
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = val(*x).shape();
                let (outer, extent, inner) = split_axis(shape, *axis);
                let len = g.shape()[*axis];
                let mut data = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    let to = (o * extent + start) * inner;
                    data[to..to + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, Tensor::from_parts(shape.to_vec(), data));
            }
            Op::Reshape(x) => acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), g.data().to_vec())),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                acc(*x, permute_tensor(g, &inverse));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let k = ta.last_dim();
                let n = tb.shape()[1];
                let m = ta.len() / k;
                let mut da = vec![0.0; m * k];
                gemm(g.data(), &transpose(tb.data(), k, n), &mut da, m, n, k);
                acc(*a, Tensor::from_parts(ta.shape().to_vec(), da));
                let mut db = vec![0.0; k * n];
                gemm(&transpose(ta.data(), m, k), g.data(), &mut db, k, m, n);
                acc(*b, Tensor::from_parts(tb.shape().to_vec(), db));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = g.shape()[2];
                let mut da = vec![0.0; batch * m * k];
                let mut db = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let ab = &ta.data()[i * m * k..(i + 1) * m * k];
                    let bb = &tb.data()[i * k * n..(i + 1) * k * n];
                    let gb = &g.data()[i * m * n..(i + 1) * m * n];
                    let da_i = &mut da[i * m * k..(i + 1) * m * k];
                    let db_i = &mut db[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // C = A·Bᵀ with B stored [n, k]: dA = G·B, dB = Gᵀ·A.
                        gemm(gb, bb, da_i, m, n, k);
                        gemm(&transpose(gb, m, n), ab, db_i, n, m, k);
                    } else {
                        gemm(gb, &transpose(bb, k, n), da_i, m, n, k);
                        gemm(&transpose(ab, m, k), gb, db_i, k, m, n);
                    }
                }
                acc(*a, Tensor::from_parts(ta.shape().to_vec(), da));
                acc(*b, Tensor::from_parts(tb.shape().to_vec(), db));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.last_dim();
                let mut data = vec![0.0; y.len()];
                for ((out, yr), gr) in data.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), data));
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let n = y.last_dim();
                let mut data = vec![0.0; y.len()];
                for ((out, yr), gr) in data.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = gv - yv.exp() * total;
                    }
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), data));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain).data();
                let d = gv.len();
                let mut dx = vec![0.0; xhat.len()];
                let mut dg = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dg[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] = is * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
                acc(*gain, Tensor::from_parts(vec![d], dg));
                acc(*bias, Tensor::from_parts(vec![d], dbias));
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let d = y.last_dim();
                let mut data = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        data[r * d + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), data));
            }
            Op::Nll { x, labels } => {
                let t = val(*x);
                let c = t.shape()[1];
                let mut data = vec![0.0; t.len()];
                let w = -g.item() / labels.len() as f64;
                for (b, &y) in labels.iter().enumerate() {
                    data[b * c + y] = w;
                }
                acc(*x, Tensor::from_parts(t.shape().to_vec(), data));
            }
            Op::Gather { x, indices } => {
                let t = val(*x);
                let (n, d) = (t.shape()[1], t.shape()[2]);
                let mut data = vec![0.0; t.len()];
                for (slot, &src) in indices.iter().enumerate() {
                    let b = slot % n;
                    let to = (src * n + b) * d;
                    let from = slot * d;
                    for j in 0..d {
                        data[to + j] += g.data()[from + j];
                    }
                }
                acc(*x, Tensor::from_parts(t.shape().to_vec(), data));
            }
            Op::Broadcast { x, n } => {
                let t = val(*x);
                let (len, d) = (t.shape()[0], t.shape()[1]);
                let mut data = vec![0.0; len * d];
                for i in 0..len {
                    for b in 0..*n {
                        let from = (i * n + b) * d;
                        for j in 0..d {
                            data[i * d + j] += g.data()[from + j];
                        }
                    }
                }
                acc(*x, Tensor::from_parts(vec![len, d], data));
            }
            Op::IndexRows { table, ids } => {
                let t = val(*table);
                let d = t.shape()[1];
                let mut data = vec![0.0; t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        data[id * d + j] += g.data()[r * d + j];
                    }
                }
                acc(*table, Tensor::from_parts(t.shape().to_vec(), data));
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// `(outer, extent, inner)` sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut data = Vec::with_capacity(t.len());
    let mut index = vec![0; rank];
    let mut offset = 0;
    let src = t.data();
    for _ in 0..t.len() {
        data.push(src[offset]);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            offset += strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, data)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Value and derivative of the tanh-approximated GELU.
fn gelu(x: f64) -> (f64, f64) {
    let inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    let value = 0.5 * x * (1.0 + th);
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    let deriv = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner;
    (value, deriv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 3.0, 4.0, 5.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradients() {
        let mut r = rng();
        let a = Tensor::uniform(&mut r, &[4, 5], -1.0, 1.0);
        let b = Tensor::uniform(&mut r, &[5, 3], -1.0, 1.0);
        let w = Tensor::uniform(&mut r, &[4, 3], -1.0, 1.0);
        let report = check_gradients(&[a, b], 1e-5, |tape, v| {
            let c = tape.matmul(v[0], v[1])?;
            let w = tape.constant(w.clone());
            let m = tape.mul(c, w)?;
            Ok(tape.sum(m))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[1, 3], &[1000.0, 0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 1.0).abs() <= 1e-12 && out[1] <= 1e-12 && out[2] <= 1e-12);

        let x = tape.constant(Tensor::uniform(&mut rng(), &[3, 4], -5.0, 5.0));
        let y = tape.softmax_rows(x).unwrap();
        for r in 0..3 {
            let row = tape.value(y).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&mut rng(), &[2, 3, 3], -1.0, 1.0));
        let y = tape.causal_softmax(x).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at(&[0, 0, 0]), 1.0);
        assert_eq!(v.at(&[1, 1, 2]), 0.0);
        assert!((v.row(4).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_gradients() {
        let mut r = rng();
        let x = Tensor::uniform(&mut r, &[2, 4, 4], -1.0, 1.0);
        let w = Tensor::uniform(&mut r, &[2, 4, 4], -1.0, 1.0);
        for causal in [false, true] {
            let report = check_gradients(&[x.clone()], 1e-5, |tape, v| {
                let y = if causal { tape.causal_softmax(v[0])? } else { tape.softmax_rows(v[0])? };
                let w = tape.constant(w.clone());
                let m = tape.mul(y, w)?;
                Ok(tape.sum(m))
            })
            .unwrap();
            assert!(report.max_rel_error <= 1e-5, "{report:?}");
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[-1.0, 1.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-9 && (out[1] - 1.0).abs() < 1e-9);

        let bad = tape.constant(Tensor::ones(&[3]));
        assert!(matches!(tape.layer_norm(x, bad, b, 1e-5), Err(Error::Dimension { .. })));
        assert!(matches!(tape.layer_norm(x, g, b, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn layer_norm_gradients() {
        let mut r = rng();
        let x = Tensor::uniform(&mut r, &[2, 8], -1.0, 1.0);
        let g = Tensor::uniform(&mut r, &[8], 0.5, 1.5);
        let b = Tensor::uniform(&mut r, &[8], -1.0, 1.0);
        let w = Tensor::uniform(&mut r, &[2, 8], -1.0, 1.0);
        let report = check_gradients(&[x, g, b], 1e-5, |tape, v| {
            let y = tape.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let w = tape.constant(w.clone());
            let m = tape.mul(y, w)?;
            Ok(tape.sum(m))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn square_mean_and_gelu() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.square(x);
        let m = tape.mean_over_axis(sq, 0).unwrap();
        assert!((tape.value(m).item() - 14.0 / 3.0).abs() < 1e-15);

        let x = Tensor::uniform(&mut rng(), &[16], -1.0, 1.0);
        let report = check_gradients(&[x], 1e-5, |tape, v| {
            let y = tape.gelu(v[0]);
            let y = tape.square(y);
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn slice_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.slice(x, 0, 2, 2), Err(Error::Bounds { .. })));
    }

    #[test]
    fn structural_ops_gradients() {
        let mut r = rng();
        let a = Tensor::uniform(&mut r, &[3, 2, 4], -1.0, 1.0);
        let b = Tensor::uniform(&mut r, &[2, 2, 4], -1.0, 1.0);
        let p = Tensor::uniform(&mut r, &[2, 4], -1.0, 1.0);
        let bias = Tensor::uniform(&mut r, &[4], -1.0, 1.0);
        let report = check_gradients(&[a, b, p, bias], 1e-5, |tape, v| {
            let cat = tape.concat(&[v[0], v[1]], 0)?; // [5,2,4]
            let sl = tape.slice(cat, 0, 1, 3)?; // [3,2,4]
            let g = tape.gather_rows(sl, &[vec![2, 0], vec![1, 1]])?; // [2,2,4]
            let bp = tape.broadcast_batch(v[2], 2)?; // [2,2,4]
            let s = tape.mul(g, bp)?;
            let s = tape.add_bias(s, v[3])?;
            let pm = tape.permute(s, &[1, 2, 0])?; // [2,4,2]
            let rs = tape.reshape(pm, &[4, 4])?;
            let w = tape.constant(Tensor::uniform(&mut ChaCha8Rng::seed_from_u64(1), &[4, 4], -1.0, 1.0));
            let lhs = tape.reshape(rs, &[1, 4, 4])?;
            let rhs = tape.reshape(w, &[1, 4, 4])?;
            let mm = tape.batch_matmul(lhs, rhs, true)?;
            let red = tape.mean_over_axis(mm, 2)?;
            let red = tape.sum_over_axis(red, 1)?;
            let sq = tape.square(red);
            let n = tape.l2_normalize(s);
            let n = tape.sum(n);
            let total = tape.sum(sq);
            tape.add(total, n)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn log_softmax_nll_gradients() {
        let mut r = rng();
        let x = Tensor::uniform(&mut r, &[3, 5], -2.0, 2.0);
        let report = check_gradients(&[x], 1e-5, |tape, v| {
            let lp = tape.log_softmax_rows(v[0])?;
            tape.nll(lp, &[0, 4, 2])
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::uniform(&mut rng(), &[2, 3], -1.0, 1.0));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::ones(&[2, 3]));

        let mut tape = Tape::new();
        let value = Tensor::uniform(&mut rng(), &[4], -1.0, 1.0);
        let x = tape.param(value.clone());
        let sq = tape.square(x);
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &value.map(|v| 2.0 * v));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_tensors_never_receive_gradients() {
        let mut tape = Tape::new();
        let frozen = tape.constant(Tensor::ones(&[2, 2]));
        let p = tape.param(Tensor::ones(&[2, 2]));
        let m = tape.matmul(frozen, p).unwrap();
        let f2 = tape.square(frozen);
        let m = tape.mul(m, f2).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert!(tape.grad(f2).is_none());
        assert!(tape.grad(p).is_some());
        tape.clear();
        assert!(tape.is_empty());
    }
}
