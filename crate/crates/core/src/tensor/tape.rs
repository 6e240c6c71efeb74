use std::collections::HashMap;

use super::kernels::{self, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{ParamId, ParamStore, Result, Tensor, TensorError, LAYER_NORM_EPS};

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
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    RowSums(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    AttnProbs {
        q: Var,
        k: Var,
        heads: usize,
    },
    AttnApply {
        probs: Var,
        v: Var,
        heads: usize,
    },
    PromptAttention {
        probs: Var,
        heads: usize,
        n_query: usize,
        queries: Vec<usize>,
        keys: Vec<usize>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations and the values they produced.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{op} expects a matrix"),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Bind a stored parameter as a leaf. Repeated binds return the same
    /// node so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), !store.is_frozen());
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// `x[n×d] + bias` with `bias` holding `d` values, broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.cols();
        if tb.numel() != d {
            return Err(mismatch("add_row", tx, tb));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    /// Scale row `r` of `x` by `scales[r]`.
    pub fn scale_rows(&mut self, x: Var, scales: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(scales));
        if ts.numel() != tx.rows() {
            return Err(mismatch("scale_rows", tx, ts));
        }
        let d = tx.cols();
        let mut out = tx.clone();
        for (row, s) in out.data_mut().chunks_mut(d).zip(ts.data()) {
            for o in row.iter_mut() {
                *o *= s;
            }
        }
        let rg = self.rg(&[x, scales]);
        Ok(self.push(out, Op::ScaleRows(x, scales), rg))
    }

    /// Multiply every entry by a one-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.numel() != 1 {
            return Err(mismatch("mul_scalar", tx, ts));
        }
        let k = ts.data()[0];
        let data = tx.data().iter().map(|v| v * k).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::MulScalar(x, s), rg))
    }

    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.numel() != 1 {
            return Err(mismatch("add_scalar", tx, ts));
        }
        let k = ts.data()[0];
        let data = tx.data().iter().map(|v| v + k).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::AddScalar(x, s), rg))
    }

    /// `alpha·x + beta` with constant coefficients.
    pub fn affine(&mut self, x: Var, alpha: f64, beta: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| alpha * v + beta).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Affine(x, alpha), rg)
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        self.affine(x, alpha, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul", ta)?;
        let (k2, n) = require_matrix("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = require_matrix("transpose", tx)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = tx.data()[i * c + j];
            }
        }
        let value = Tensor::matrix(c, r, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    /// Stack matrices with equal column counts along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_rows",
            reason: "no operands".into(),
        })?;
        let cols = require_matrix("concat_rows", self.value(*first))?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = require_matrix("concat_rows", t)?;
            if c != cols {
                return Err(mismatch("concat_rows", self.value(*first), t));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Join matrices with equal row counts along axis 1.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            reason: "no operands".into(),
        })?;
        let rows = require_matrix("concat_cols", self.value(*first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = require_matrix("concat_cols", t)?;
            if r != rows {
                return Err(mismatch("concat_cols", self.value(*first), t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::matrix(rows, total, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = require_matrix("slice_rows", tx)?;
        if start >= end || end > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                limit: r,
            });
        }
        let value = Tensor::matrix(end - start, c, tx.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows(x, start), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = require_matrix("slice_cols", tx)?;
        if start >= end || end > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                limit: c,
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&tx.data()[i * c + start..i * c + end]);
        }
        let value = Tensor::matrix(r, w, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols(x, start), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Column means of a matrix: `[n×d] → [1×d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = require_matrix("mean_rows", tx)?;
        let mut out = vec![0.0; c];
        for row in tx.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        let value = Tensor::matrix(1, c, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MeanRows(x), rg))
    }

    /// Per-row sums: `[n×d] → [n×1]`.
    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = require_matrix("row_sums", tx)?;
        let out = tx.data().chunks(c).map(|row| row.iter().sum()).collect();
        let value = Tensor::matrix(r, 1, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::RowSums(x), rg))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: tx.rank(),
            });
        }
        if !tx.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let (outer, len, inner) = axis_split(tx.shape(), axis);
        let mut out = tx.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x, axis), rg))
    }

    /// Row-wise layer normalisation with affine `gain`/`bias` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.numel() != d {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.numel() != d {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    /// Scale each row to unit Euclidean norm. A zero row is rejected.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        let mut out = tx.data().to_vec();
        let mut norms = Vec::with_capacity(tx.rows());
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(TensorError::Invalid {
                    op: "normalize_rows",
                    reason: "zero-norm or non-finite row".into(),
                });
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::NormalizeRows { x, norms }, rg))
    }

    /// Scaled dot-product attention probabilities for every head.
    ///
    /// `q` is `[n_q × d]`, `k` is `[n_k × d]`; head `h` uses columns
    /// `h·d/heads..(h+1)·d/heads`. The result is `[heads·n_q × n_k]`, head
    /// major. With `causal`, query `i` only sees keys `0..=i` and masked
    /// entries are exactly zero.
    pub fn attention_probs(&mut self, q: Var, k: Var, heads: usize, causal: bool) -> Result<Var> {
        let (tq, tk) = (self.value(q), self.value(k));
        let (nq, d) = require_matrix("attention_probs", tq)?;
        let (nk, dk) = require_matrix("attention_probs", tk)?;
        if d != dk {
            return Err(mismatch("attention_probs", tq, tk));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        if causal && nq != nk {
            return Err(mismatch("causal attention_probs", tq, tk));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; heads * nq * nk];
        for h in 0..heads {
            for i in 0..nq {
                let qrow = &tq.data()[i * d + h * dh..i * d + (h + 1) * dh];
                let row = &mut out[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let len = if causal { i + 1 } else { nk };
                for (j, r) in row.iter_mut().enumerate().take(len) {
                    let krow = &tk.data()[j * d + h * dh..j * d + (h + 1) * dh];
                    *r = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                if row[..len].iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite {
                        op: "attention_probs",
                    });
                }
                kernels::softmax_row_prefix(row, len);
            }
        }
        let value = Tensor::matrix(heads * nq, nk, out)?;
        let rg = self.rg(&[q, k]);
        Ok(self.push(value, Op::AttnProbs { q, k, heads }, rg))
    }

    /// Weighted sum of values per head, heads concatenated along columns.
    pub fn attention_apply(&mut self, probs: Var, v: Var, heads: usize) -> Result<Var> {
        let (tp, tv) = (self.value(probs), self.value(v));
        let (hn, nk) = require_matrix("attention_apply", tp)?;
        let (nk2, d) = require_matrix("attention_apply", tv)?;
        if nk != nk2 || heads == 0 || hn % heads != 0 || d % heads != 0 {
            return Err(mismatch("attention_apply", tp, tv));
        }
        let nq = hn / heads;
        let dh = d / heads;
        let mut out = vec![0.0; nq * d];
        for h in 0..heads {
            for i in 0..nq {
                let prow = &tp.data()[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &p) in prow.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let vrow = &tv.data()[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
        }
        let value = Tensor::matrix(nq, d, out)?;
        let rg = self.rg(&[probs, v]);
        Ok(self.push(value, Op::AttnApply { probs, v, heads }, rg))
    }

    /// Mean attention that the listed query rows pay to each listed key,
    /// averaged over heads. Returns `[keys.len() × 1]`.
    pub fn prompt_attention(
        &mut self,
        probs: Var,
        heads: usize,
        queries: &[usize],
        keys: &[usize],
    ) -> Result<Var> {
        let tp = self.value(probs);
        let (hn, nk) = require_matrix("prompt_attention", tp)?;
        if heads == 0 || hn % heads != 0 {
            return Err(TensorError::Config(format!(
                "{hn} attention rows do not split into {heads} heads"
            )));
        }
        let nq = hn / heads;
        if queries.is_empty() {
            return Err(TensorError::Invalid {
                op: "prompt_attention",
                reason: "empty non-prompt query set".into(),
            });
        }
        if keys.is_empty() {
            return Err(TensorError::Invalid {
                op: "prompt_attention",
                reason: "no prompt keys".into(),
            });
        }
        if let Some(&q) = queries.iter().find(|&&q| q >= nq) {
            return Err(TensorError::IndexOutOfRange {
                op: "prompt_attention",
                index: q,
                limit: nq,
            });
        }
        if let Some(&k) = keys.iter().find(|&&k| k >= nk) {
            return Err(TensorError::IndexOutOfRange {
                op: "prompt_attention",
                index: k,
                limit: nk,
            });
        }
        let denom = (heads * queries.len()) as f64;
        let mut out = vec![0.0; keys.len()];
        for (o, &key) in out.iter_mut().zip(keys) {
            let mut s = 0.0;
            for h in 0..heads {
                for &q in queries {
                    s += tp.data()[(h * nq + q) * nk + key];
                }
            }
            *o = s / denom;
        }
        let value = Tensor::matrix(keys.len(), 1, out)?;
        let rg = self.rg(&[probs]);
        Ok(self.push(
            value,
            Op::PromptAttention {
                probs,
                heads,
                n_query: nq,
                queries: queries.to_vec(),
                keys: keys.to_vec(),
            },
            rg,
        ))
    }

    /// Look up rows of `table` (an embedding matrix).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = require_matrix("gather_rows", tt)?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    limit: v,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let value = Tensor::matrix(ids.len(), d, data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (b, c) = require_matrix("cross_entropy", tl)?;
        if targets.len() != b {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                reason: format!("{} targets for {b} rows", targets.len()),
            });
        }
        if !tl.is_finite() {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    limit: c,
                });
            }
            let row = &mut probs[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let seed = Tensor::full(self.value(root).shape(), 1.0);
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(root).shape() {
            return Err(mismatch("backward", self.value(root), &seed));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(seed.into_data());
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients {
            grads: tensors,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        // Returns the accumulator for `v` if it participates in differentiation.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    Some(
                        grads[v.0]
                            .get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()])
                            .as_mut_slice(),
                    )
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(*b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(*b) {
                    for (o, x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if let Some(ga) = acc!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(vb) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(va) {
                        *o += x * y;
                    }
                }
            }
            Op::AddRow(x, b) => {
                let d = val(*x).cols();
                if let Some(gx) = acc!(*x) {
                    add_into(gx, g);
                }
                if let Some(gb) = acc!(*b) {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
            }
            Op::ScaleRows(x, s) => {
                let d = val(*x).cols();
                let (vx, vs) = (val(*x).data(), val(*s).data());
                if let Some(gx) = acc!(*x) {
                    for ((orow, grow), sv) in gx.chunks_mut(d).zip(g.chunks(d)).zip(vs) {
                        for (o, gv) in orow.iter_mut().zip(grow) {
                            *o += gv * sv;
                        }
                    }
                }
                if let Some(gs) = acc!(*s) {
                    for ((o, grow), xrow) in gs.iter_mut().zip(g.chunks(d)).zip(vx.chunks(d)) {
                        *o += dot(grow, xrow);
                    }
                }
            }
            Op::MulScalar(x, s) => {
                let k = val(*s).data()[0];
                let vx = val(*x).data();
                if let Some(gx) = acc!(*x) {
                    for (o, gv) in gx.iter_mut().zip(g) {
                        *o += gv * k;
                    }
                }
                if let Some(gs) = acc!(*s) {
                    gs[0] += dot(g, vx);
                }
            }
            Op::AddScalar(x, s) => {
                if let Some(gx) = acc!(*x) {
                    add_into(gx, g);
                }
                if let Some(gs) = acc!(*s) {
                    gs[0] += g.iter().sum::<f64>();
                }
            }
            Op::Affine(x, alpha) => {
                if let Some(gx) = acc!(*x) {
                    for (o, gv) in gx.iter_mut().zip(g) {
                        *o += alpha * gv;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(ga) = acc!(*a) {
                    matmul_bt_acc(g, tb.data(), ga, m, n, k);
                }
                if let Some(gb) = acc!(*b) {
                    matmul_at_acc(ta.data(), g, gb, m, k, n);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                if let Some(gx) = acc!(*x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if let Some(gp) = acc!(p) {
                        add_into(gp, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if let Some(gp) = acc!(p) {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows(x, start) => {
                let c = val(*x).cols();
                if let Some(gx) = acc!(*x) {
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::SliceCols(x, start) => {
                let c = val(*x).cols();
                let w = node.value.cols();
                if let Some(gx) = acc!(*x) {
                    for (r, grow) in g.chunks(w).enumerate() {
                        add_into(&mut gx[r * c + start..r * c + start + w], grow);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                if let Some(gx) = acc!(*x) {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                if let Some(gx) = acc!(*x) {
                    for row in gx.chunks_mut(c) {
                        for (o, gv) in row.iter_mut().zip(g) {
                            *o += gv / r as f64;
                        }
                    }
                }
            }
            Op::RowSums(x) => {
                let c = val(*x).cols();
                if let Some(gx) = acc!(*x) {
                    for (row, gv) in gx.chunks_mut(c).zip(g) {
                        for o in row.iter_mut() {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                if let Some(gx) = acc!(*x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let s: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gv = val(*gain).data();
                if let Some(gg) = acc!(*gain) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, a), b) in gg.iter_mut().zip(grow).zip(hrow) {
                            *o += a * b;
                        }
                    }
                }
                if let Some(gb) = acc!(*bias) {
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                }
                if let Some(gx) = acc!(*x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, ((orow, grow), hrow)) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dot(&dxhat, hrow) / d as f64;
                        for j in 0..d {
                            orow[j] += rstd[r] * (dxhat[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = val(*x).data();
                if let Some(gx) = acc!(*x) {
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(vx) {
                        *o += gv * kernels::gelu_grad(*xv);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = acc!(*x) {
                    for ((o, gv), yv) in gx.iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Exp(x) => {
                let y = node.value.data();
                if let Some(gx) = acc!(*x) {
                    for ((o, gv), yv) in gx.iter_mut().zip(g).zip(y) {
                        *o += gv * yv;
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let d = node.value.cols();
                let y = node.value.data();
                if let Some(gx) = acc!(*x) {
                    for (r, ((orow, grow), yrow)) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(y.chunks(d))
                        .enumerate()
                    {
                        let proj = dot(grow, yrow);
                        for j in 0..d {
                            orow[j] += (grow[j] - yrow[j] * proj) / norms[r];
                        }
                    }
                }
            }
            Op::AttnProbs { q, k, heads } => {
                let heads = *heads;
                let (tq, tk) = (val(*q), val(*k));
                let (nq, d) = (tq.shape()[0], tq.shape()[1]);
                let nk = tk.shape()[0];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let p = node.value.data();
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), head-major like P.
                let mut ds = vec![0.0; p.len()];
                for r in 0..heads * nq {
                    let prow = &p[r * nk..(r + 1) * nk];
                    let grow = &g[r * nk..(r + 1) * nk];
                    let s = dot(prow, grow);
                    for j in 0..nk {
                        ds[r * nk + j] = prow[j] * (grow[j] - s);
                    }
                }
                if let Some(gq) = acc!(*q) {
                    for h in 0..heads {
                        for i in 0..nq {
                            let dsrow = &ds[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                            let orow = &mut gq[i * d + h * dh..i * d + (h + 1) * dh];
                            for (j, &w) in dsrow.iter().enumerate() {
                                if w == 0.0 {
                                    continue;
                                }
                                let krow = &tk.data()[j * d + h * dh..j * d + (h + 1) * dh];
                                for (o, kv) in orow.iter_mut().zip(krow) {
                                    *o += scale * w * kv;
                                }
                            }
                        }
                    }
                }
                if let Some(gk) = acc!(*k) {
                    for h in 0..heads {
                        for i in 0..nq {
                            let dsrow = &ds[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                            let qrow = &tq.data()[i * d + h * dh..i * d + (h + 1) * dh];
                            for (j, &w) in dsrow.iter().enumerate() {
                                if w == 0.0 {
                                    continue;
                                }
                                let orow = &mut gk[j * d + h * dh..j * d + (h + 1) * dh];
                                for (o, qv) in orow.iter_mut().zip(qrow) {
                                    *o += scale * w * qv;
                                }
                            }
                        }
                    }
                }
            }
            Op::AttnApply { probs, v, heads } => {
                let heads = *heads;
                let (tp, tv) = (val(*probs), val(*v));
                let nk = tp.shape()[1];
                let nq = tp.shape()[0] / heads;
                let d = tv.shape()[1];
                let dh = d / heads;
                if let Some(gp) = acc!(*probs) {
                    for h in 0..heads {
                        for i in 0..nq {
                            let grow = &g[i * d + h * dh..i * d + (h + 1) * dh];
                            for j in 0..nk {
                                let vrow = &tv.data()[j * d + h * dh..j * d + (h + 1) * dh];
                                gp[(h * nq + i) * nk + j] += dot(grow, vrow);
                            }
                        }
                    }
                }
                if let Some(gv) = acc!(*v) {
                    for h in 0..heads {
                        for i in 0..nq {
                            let grow = &g[i * d + h * dh..i * d + (h + 1) * dh];
                            let prow = &tp.data()[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                            for (j, &p) in prow.iter().enumerate() {
                                if p == 0.0 {
                                    continue;
                                }
                                let orow = &mut gv[j * d + h * dh..j * d + (h + 1) * dh];
                                for (o, gvv) in orow.iter_mut().zip(grow) {
                                    *o += p * gvv;
                                }
                            }
                        }
                    }
                }
            }
            Op::PromptAttention {
                probs,
                heads,
                n_query,
                queries,
                keys,
            } => {
                let nk = val(*probs).shape()[1];
                let denom = (heads * queries.len()) as f64;
                if let Some(gp) = acc!(*probs) {
                    for (gv, &key) in g.iter().zip(keys) {
                        for h in 0..*heads {
                            for &q in queries {
                                gp[(h * n_query + q) * nk + key] += gv / denom;
                            }
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = node.value.cols();
                if let Some(gt) = acc!(*table) {
                    for (grow, &id) in g.chunks(d).zip(ids) {
                        add_into(&mut gt[id * d..(id + 1) * d], grow);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = val(*logits).cols();
                let b = targets.len() as f64;
                if let Some(gl) = acc!(*logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += g[0] * (probs[r * c + j] - onehot) / b;
                        }
                    }
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradients from one reverse sweep, indexed by [`Var`] or by bound parameter.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter bound with [`Tape::param`]. `None` if the
    /// parameter was never bound, is frozen, or did not reach the root.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }
}
