//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in execution order; [`Tape::backward`] walks them in
//! exact reverse order. Parameters are borrowed from the model rather than
//! copied, so a tape lives no longer than the weights it reads.

use std::borrow::Cow;

use crate::error::{Error, Result};

use super::kernels::{self, gelu_grad, sigmoid, softmax_slice};
use super::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Silu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<T>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    Pick {
        x: Var,
        at: Vec<(usize, usize)>,
    },
    MulRows {
        x: Var,
        w: Var,
    },
    CrossEntropyMean {
        logits: Var,
        targets: Vec<u32>,
        probs: Vec<T>,
    },
    ColMean(Var),
    DotConst {
        x: Var,
        weights: Vec<T>,
    },
    Sum(Var),
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Create with [`Tape::new`] for training or
/// [`Tape::inference`] when no gradients are wanted.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    grad_enabled: bool,
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        value.ensure_finite(name)?;
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf borrowed from the caller.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::mul(self.value(a), self.value(b))?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = kernels::scale(self.value(a), factor);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (out, inv_rms) = kernels::rms_norm(self.value(x), self.value(gain))?;
        self.push("rms_norm", out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let out = kernels::embedding(self.value(table), ids)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push("embedding", out, op, &[table])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = kernels::silu(self.value(x));
        self.push("silu", out, Op::Silu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = kernels::gelu(self.value(x));
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let axis = xv.shape().len().saturating_sub(1);
        let out = kernels::softmax(xv, axis)?;
        self.push("softmax", out, Op::SoftmaxRows(x), &[x])
    }

    /// Multi-head causal self-attention over `rows / seq_len` independent
    /// sequences laid out back to back. `q`, `k`, `v` are `[rows × d]` with
    /// `d` divisible by `heads`. Output row `i` only reads rows `≤ i` of its
    /// own sequence.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.shape().len() != 2 {
            return Err(Error::dim("causal_attention", "q, k, v must share a 2-D shape"));
        }
        let (rows, d) = (qv.rows(), qv.cols());
        if heads == 0 || d % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::dim(
                "causal_attention",
                format!("{rows}x{d} with {heads} heads and sequence length {seq_len}"),
            ));
        }
        let dh = d / heads;
        let n_seq = rows / seq_len;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); n_seq * heads * seq_len * seq_len];
        let mut scores = vec![T::zero(); seq_len];
        let mut p = vec![T::zero(); seq_len];
        for b in 0..n_seq {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let pbase = (b * heads + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let qi = &qv.row(b * seq_len + i)[cols.clone()];
                    for (j, s) in scores[..=i].iter_mut().enumerate() {
                        let kj = &kv.row(b * seq_len + j)[cols.clone()];
                        *s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
                    }
                    softmax_slice(&scores[..=i], &mut p[..=i]);
                    let orow = &mut out[(b * seq_len + i) * d..][cols.clone()];
                    for (j, &pj) in p[..=i].iter().enumerate() {
                        probs[pbase + i * seq_len + j] = pj;
                        let vj = &vv.row(b * seq_len + j)[cols.clone()];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            seq_len,
            probs,
        };
        self.push("causal_attention", out, op, &[q, k, v])
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.rows();
        let mut data = Vec::with_capacity(rows.len() * xv.cols());
        for &r in rows {
            if r >= n {
                return Err(Error::Index(format!("row {r} out of range for {n} rows")));
            }
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), xv.cols()], data)?;
        let op = Op::GatherRows {
            x,
            rows: rows.to_vec(),
        };
        self.push("gather_rows", out, op, &[x])
    }

    /// `[n_rows × width]` sum where part `p` adds its row `i` into output row
    /// `rows_p[i]`. Parts are accumulated in the order given.
    pub fn scatter_rows(
        &mut self,
        n_rows: usize,
        width: usize,
        parts: Vec<(Var, Vec<usize>)>,
    ) -> Result<Var> {
        let mut out = Tensor::zeros(vec![n_rows, width]);
        for (part, rows) in &parts {
            let pv = self.value(*part);
            if pv.cols() != width || pv.rows() != rows.len() {
                return Err(Error::dim(
                    "scatter_rows",
                    format!("part {:?} for {} rows of width {width}", pv.shape(), rows.len()),
                ));
            }
            for (i, &r) in rows.iter().enumerate() {
                if r >= n_rows {
                    return Err(Error::Index(format!("row {r} out of range for {n_rows} rows")));
                }
                for (o, &x) in out.row_mut(r).iter_mut().zip(pv.row(i)) {
                    *o += x;
                }
            }
        }
        let inputs: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        self.push("scatter_rows", out, Op::ScatterRows { parts }, &inputs)
    }

    /// Column vector `[m × 1]` of the entries `x[r, c]` for each `(r, c)`.
    pub fn pick(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(at.len());
        for &(r, c) in at {
            if r >= rows || c >= cols {
                return Err(Error::Index(format!("({r}, {c}) outside {rows}x{cols}")));
            }
            data.push(xv.row(r)[c]);
        }
        let out = Tensor::new(vec![at.len(), 1], data)?;
        let op = Op::Pick { x, at: at.to_vec() };
        self.push("pick", out, op, &[x])
    }

    /// Scales row `i` of `x` by `w[i]`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.len() != xv.rows() {
            return Err(Error::dim(
                "mul_rows",
                format!("{} weights for {} rows", wv.len(), xv.rows()),
            ));
        }
        let mut out = xv.clone();
        for (i, &wi) in wv.data().iter().enumerate() {
            for o in out.row_mut(i) {
                *o *= wi;
            }
        }
        self.push("mul_rows", out, Op::MulRows { x, w }, &[x, w])
    }

    /// Mean next-token cross-entropy over all rows.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let lv = self.value(logits);
        let losses = kernels::cross_entropy_nll(lv, targets)?;
        let n = T::lit(targets.len().max(1) as f64);
        let mean = losses.iter().copied().sum::<T>() / n;
        let probs = kernels::softmax(lv, 1)?.into_data();
        let op = Op::CrossEntropyMean {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(mean), op, &[logits])
    }

    /// Per-column mean of a `[rows × cols]` tensor, shape `[cols]`.
    pub fn col_mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            for (o, &v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let n = T::lit(rows.max(1) as f64);
        for o in &mut out {
            *o /= n;
        }
        self.push("col_mean", Tensor::vector(out), Op::ColMean(x), &[x])
    }

    /// Scalar `Σ x_i · weights_i` with constant weights.
    pub fn dot_const(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::dim(
                "dot_const",
                format!("{} weights for {} values", weights.len(), xv.len()),
            ));
        }
        let s = xv.data().iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        self.push("dot_const", Tensor::scalar(s), Op::DotConst { x, weights }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                g.ensure_finite("backward")?;
                debug_assert_eq!(g.shape(), self.nodes[i].value.shape());
            }
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let da = kernels::matmul_nt(g, self.value(*b))?;
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = kernels::matmul_tn(self.value(*a), g)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, kernels::mul(g, self.value(*b))?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, kernels::mul(g, self.value(*a))?);
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, kernels::scale(g, *f)),
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let d = xv.cols();
                let dn = T::lit(d as f64);
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                let mut dgain = Tensor::zeros(gv.shape().to_vec());
                for r in 0..xv.rows() {
                    let (xr, gr) = (xv.row(r), g.row(r));
                    let s = inv_rms[r];
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot += gr[j] * gv.data()[j] * xr[j];
                        dgain.data_mut()[j] += gr[j] * xr[j] * s;
                    }
                    let coef = s * s * s / dn * dot;
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = s * gv.data()[j] * gr[j] - coef * xr[j];
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let mut dt = Tensor::zeros(self.value(*table).shape().to_vec());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &x) in dt.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * (s + v * s * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gv * gelu_grad(v))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.shape().to_vec());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, d) = (qv.rows(), qv.cols());
                let (heads, seq_len) = (*heads, *seq_len);
                let dh = d / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let mut dq = Tensor::zeros(vec![rows, d]);
                let mut dk = Tensor::zeros(vec![rows, d]);
                let mut dv = Tensor::zeros(vec![rows, d]);
                let mut dp = vec![T::zero(); seq_len];
                for b in 0..rows / seq_len {
                    for h in 0..heads {
                        let c0 = h * dh;
                        let pbase = (b * heads + h) * seq_len * seq_len;
                        for i in 0..seq_len {
                            let ri = b * seq_len + i;
                            let go = &g.row(ri)[c0..c0 + dh];
                            let p = &probs[pbase + i * seq_len..pbase + i * seq_len + i + 1];
                            for (j, dpj) in dp[..=i].iter_mut().enumerate() {
                                let vj = &vv.row(b * seq_len + j)[c0..c0 + dh];
                                *dpj = go.iter().zip(vj).map(|(&a, &c)| a * c).sum();
                                let dvj = &mut dv.row_mut(b * seq_len + j)[c0..c0 + dh];
                                for (o, &x) in dvj.iter_mut().zip(go) {
                                    *o += p[j] * x;
                                }
                            }
                            let row_dot: T =
                                p.iter().zip(&dp[..=i]).map(|(&a, &c)| a * c).sum();
                            let qi = &qv.row(ri)[c0..c0 + dh];
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - row_dot) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let rj = b * seq_len + j;
                                let kj = &kv.row(rj)[c0..c0 + dh];
                                let dqi = &mut dq.row_mut(ri)[c0..c0 + dh];
                                for (o, &x) in dqi.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let dkj = &mut dk.row_mut(rj)[c0..c0 + dh];
                                for (o, &x) in dkj.iter_mut().zip(qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::GatherRows { x, rows } => {
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &v) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ScatterRows { parts } => {
                for (part, rows) in parts {
                    if !self.needs(*part) {
                        continue;
                    }
                    let mut dp = Tensor::zeros(self.value(*part).shape().to_vec());
                    for (i, &r) in rows.iter().enumerate() {
                        dp.row_mut(i).copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *part, dp);
                }
            }
            Op::Pick { x, at } => {
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                    for (i, &(r, c)) in at.iter().enumerate() {
                        dx.row_mut(r)[c] += g.data()[i];
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::MulRows { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for (i, &wi) in wv.data().iter().enumerate() {
                        for o in dx.row_mut(i) {
                            *o *= wi;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let data = (0..xv.rows())
                        .map(|i| xv.row(i).iter().zip(g.row(i)).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), data)?);
                }
            }
            Op::CrossEntropyMean {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let vocab = lv.cols();
                let coef = g.data()[0] / T::lit(targets.len().max(1) as f64);
                let mut dl = Tensor::new(lv.shape().to_vec(), probs.clone())?;
                for (r, &t) in targets.iter().enumerate() {
                    dl.data_mut()[r * vocab + t as usize] -= T::one();
                }
                for v in dl.data_mut() {
                    *v *= coef;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::ColMean(x) => {
                let xv = self.value(*x);
                let n = T::lit(xv.rows().max(1) as f64);
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for r in 0..xv.rows() {
                    for (o, &gv) in dx.row_mut(r).iter_mut().zip(g.data()) {
                        *o = gv / n;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::DotConst { x, weights } => {
                let gv = g.data()[0];
                let data = weights.iter().map(|&w| w * gv).collect();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, data)?);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, g.data()[0]));
            }
        }
        Ok(())
    }
}

/// Result of [`Tape::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_scalar_loss() {
        let x = Tensor::<f64>::zeros(vec![2, 2]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let y = tape.scale(v, 2.0).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let w = Tensor::<f64>::vector(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let p = tape.param(&w);
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let m = tape.mul(p, c).unwrap();
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn reused_variable_accumulates() {
        let w = Tensor::<f64>::vector(vec![1.5]);
        let mut tape = Tape::new();
        let p = tape.param(&w);
        let y = tape.add(p, p).unwrap();
        let y = tape.mul(y, p).unwrap();
        let s = tape.sum(y).unwrap();
        // d(2w²)/dw = 4w
        assert_eq!(tape.backward(s).unwrap().get(p).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_finite_values_abort() {
        let w = Tensor::<f32>::vector(vec![f32::MAX]);
        let mut tape = Tape::new();
        let p = tape.param(&w);
        let err = tape.scale(p, 10.0).unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn attention_rows_ignore_future_positions() {
        let q = Tensor::<f64>::new(vec![3, 2], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let mut longer = q.data().to_vec();
        longer.extend_from_slice(&[9.0, -9.0]);
        let q4 = Tensor::new(vec![4, 2], longer).unwrap();

        let mut t3 = Tape::inference();
        let v3 = t3.param(&q);
        let o3 = t3.causal_attention(v3, v3, v3, 1, 3).unwrap();
        let mut t4 = Tape::inference();
        let v4 = t4.param(&q4);
        let o4 = t4.causal_attention(v4, v4, v4, 1, 4).unwrap();
        assert_eq!(t3.value(o3).data(), &t4.value(o4).data()[..6]);
    }

    #[test]
    fn inference_tape_skips_gradients() {
        let w = Tensor::<f64>::vector(vec![1.0]);
        let mut tape = Tape::inference();
        let p = tape.param(&w);
        let s = tape.sum(p).unwrap();
        assert!(tape.backward(s).unwrap().get(p).is_none());
    }
}
