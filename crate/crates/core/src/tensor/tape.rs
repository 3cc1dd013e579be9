use std::borrow::Cow;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, strided};
use super::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f32 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f32 },
    AddConst { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Gelu { a: Var },
    Tanh { a: Var },
    Embed { table: Var, ids: Vec<usize> },
    SelectRows { a: Var, rows: Vec<usize> },
    SelectCol { a: Var, col: usize },
    Reshape { a: Var },
    Dropout { a: Var, scale: Vec<f32> },
    AttnScores { q: Var, k: Var, dims: AttnDims },
    AttnApply { p: Var, v: Var, dims: AttnDims },
    Mse { a: Var, b: Var, weights: Option<Vec<f32>>, count: f32 },
    SoftCrossEntropy { logits: Var, target: Var, log_probs: Vec<f32>, row_weights: Option<Vec<f32>>, count: f32 },
    CrossEntropy { logits: Var, labels: Vec<i64>, probs: Vec<f32>, count: f32 },
    Sum { a: Var },
    Combine { terms: Vec<(Var, f32)> },
}

#[derive(Clone, Copy, Debug)]
struct AttnDims {
    batch: usize,
    len: usize,
    heads: usize,
    head_dim: usize,
}

impl AttnDims {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }
    /// Offset of the `[len, head_dim]` window for (b, h) in a `[batch*len, width]` matrix.
    fn row_block(&self, b: usize, h: usize) -> usize {
        b * self.len * self.width() + h * self.head_dim
    }
    /// Offset of the `[len, len]` block for (b, h) in a `[batch, heads, len, len]` tensor.
    fn score_block(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.len * self.len
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Wengert list of recorded ops.
///
/// Leaves either own their tensor or borrow it for the tape's lifetime.
/// [`Tape::backward`] accumulates into per-leaf gradient buffers, so calling
/// it twice without [`Tape::zero_grads`] sums the two gradients.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    leaf_grads: Vec<Option<Vec<f32>>>,
}

fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f32) -> f32 {
    let cdf = 0.5 * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f32::consts::PI).sqrt();
    cdf + x * pdf
}

fn softmax_rows(data: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        let inv = 1.0 / sum;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

fn log_softmax_rows(data: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = src.iter().map(|&s| (s - max).exp()).sum::<f32>().ln() + max;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant leaf (never receives a gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that borrows an existing tensor, typically a model parameter.
    pub fn param(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f32 {
        self.value(v).data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.leaf_grads[v.0].take()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- ops -------------------------------------------------------------

    /// `a[.., k] · b[k, n]`, or `a · bᵀ` with `b[n, k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 {
            return Err(dim_err(format!("matmul rhs must be 2-D, got {:?}", bv.shape())));
        }
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != bk {
            return Err(dim_err(format!(
                "matmul {:?} x {:?}{}",
                av.shape(),
                bv.shape(),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        if trans_b {
            gemm_nt(m, k, n, av.data(), bv.data(), &mut out);
        } else {
            gemm_nn(m, k, n, av.data(), bv.data(), &mut out);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul { a, b, trans_b }, rg))
    }

    fn broadcast_check(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() || (bv.shape().len() == 1 && bv.numel() == av.cols()) {
            Ok(())
        } else {
            Err(dim_err(format!("{what} {:?} with {:?}", av.shape(), bv.shape())))
        }
    }

    /// Elementwise sum; `b` may be a vector broadcast along the last axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = av.clone();
        let n = bv.numel();
        for (i, o) in out.data.iter_mut().enumerate() {
            *o += bv.data[i % n];
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Elementwise product; `b` may be a vector broadcast along the last axis.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = av.clone();
        let n = bv.numel();
        for (i, o) in out.data.iter_mut().enumerate() {
            *o *= bv.data[i % n];
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, factor }, rg)
    }

    /// Adds a constant of identical shape (e.g. an attention mask bias).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != c.shape() {
            return Err(dim_err(format!("add_const {:?} with {:?}", av.shape(), c.shape())));
        }
        let mut out = av.clone();
        out.data.iter_mut().zip(c.data()).for_each(|(o, &x)| *o += x);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::AddConst { a }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = softmax_rows(av.data(), av.cols());
        let out = Tensor { shape: av.shape().to_vec(), data };
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax { a }, rg)
    }

    /// Layer normalization over the last axis with elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let cols = xv.cols();
        if gv.numel() != cols || bv.numel() != cols {
            return Err(dim_err(format!(
                "layer_norm over {cols} with gain {:?}, bias {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let src = &xv.data()[r * cols..(r + 1) * cols];
            let mean = src.iter().sum::<f32>() / cols as f32;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = inv;
            for c in 0..cols {
                let h = (src[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let out = Tensor { shape: xv.shape().to_vec(), data: out };
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = gelu(*x));
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu { a }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = x.tanh());
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh { a }, rg)
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(dim_err(format!("embedding table must be 2-D, got {:?}", tv.shape())));
        }
        if ids.is_empty() {
            return Err(Error::Domain("embedding lookup with no ids".into()));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("id {id} outside table of {v} rows")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let out = Tensor { shape: vec![ids.len(), d], data: out };
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::Embed { table, ids: ids.to_vec() }, rg))
    }

    /// Gathers rows of `a` viewed as `[rows, cols]`.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (n, c) = (av.rows(), av.cols());
        if rows.is_empty() {
            return Err(Error::Domain("select_rows with no rows".into()));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(dim_err(format!("row {r} outside {n} rows")));
            }
            out.extend_from_slice(av.row(r));
        }
        let out = Tensor { shape: vec![rows.len(), c], data: out };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SelectRows { a, rows: rows.to_vec() }, rg))
    }

    /// Column `col` of `a` viewed as `[rows, cols]`, as a `[rows]` vector.
    pub fn select_col(&mut self, a: Var, col: usize) -> Result<Var> {
        let av = self.value(a);
        let (n, c) = (av.rows(), av.cols());
        if col >= c {
            return Err(dim_err(format!("column {col} outside {c} columns")));
        }
        let data = (0..n).map(|r| av.data()[r * c + col]).collect();
        let out = Tensor { shape: vec![n], data };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SelectCol { a, col }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    /// Inverted dropout with a caller-supplied keep mask.
    pub fn dropout(&mut self, a: Var, keep: &[bool], p: f32) -> Result<Var> {
        let av = self.value(a);
        if keep.len() != av.numel() {
            return Err(dim_err("dropout mask size"));
        }
        let inv = 1.0 / (1.0 - p);
        let scale: Vec<f32> = keep.iter().map(|&k| if k { inv } else { 0.0 }).collect();
        let mut out = av.clone();
        out.data.iter_mut().zip(&scale).for_each(|(o, s)| *o *= s);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Dropout { a, scale }, rg))
    }

    fn attn_dims(&self, x: Var, batch: usize, len: usize, heads: usize) -> Result<AttnDims> {
        let xv = self.value(x);
        let width = xv.cols();
        if heads == 0 || width % heads != 0 || xv.rows() != batch * len {
            return Err(dim_err(format!(
                "attention over {:?} with batch {batch}, len {len}, heads {heads}",
                xv.shape()
            )));
        }
        Ok(AttnDims { batch, len, heads, head_dim: width / heads })
    }

    /// Scaled per-head scores `q·kᵀ/√d_h` for `[batch*len, d]` inputs,
    /// returned as `[batch, heads, len, len]`.
    pub fn attn_scores(&mut self, q: Var, k: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let dims = self.attn_dims(q, batch, len, heads)?;
        if self.value(k).shape() != self.value(q).shape() {
            return Err(dim_err("attention query/key shapes differ"));
        }
        let (qv, kv) = (self.value(q).data(), self.value(k).data());
        let w = dims.width();
        let mut out = vec![0.0; batch * heads * len * len];
        for b in 0..batch {
            for h in 0..heads {
                let rb = dims.row_block(b, h);
                let sb = dims.score_block(b, h);
                strided(
                    len,
                    dims.head_dim,
                    len,
                    &qv[rb..],
                    (w, 1),
                    &kv[rb..],
                    (1, w),
                    &mut out[sb..],
                    (len, 1),
                );
            }
        }
        let factor = 1.0 / (dims.head_dim as f32).sqrt();
        out.iter_mut().for_each(|x| *x *= factor);
        let out = Tensor { shape: vec![batch, heads, len, len], data: out };
        let rg = self.rg(&[q, k]);
        Ok(self.push(out, Op::AttnScores { q, k, dims }, rg))
    }

    /// Per-head `P·V` for probabilities `[batch, heads, len, len]` and values
    /// `[batch*len, d]`; heads are concatenated back into `[batch*len, d]`.
    pub fn attn_apply(&mut self, p: Var, v: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let dims = self.attn_dims(v, batch, len, heads)?;
        if self.value(p).shape() != [batch, heads, len, len] {
            return Err(dim_err("attention probabilities shape"));
        }
        let (pv, vv) = (self.value(p).data(), self.value(v).data());
        let w = dims.width();
        let mut out = vec![0.0; batch * len * w];
        for b in 0..batch {
            for h in 0..heads {
                let rb = dims.row_block(b, h);
                let sb = dims.score_block(b, h);
                strided(
                    len,
                    len,
                    dims.head_dim,
                    &pv[sb..],
                    (len, 1),
                    &vv[rb..],
                    (w, 1),
                    &mut out[rb..],
                    (w, 1),
                );
            }
        }
        let out = Tensor { shape: self.value(v).shape().to_vec(), data: out };
        let rg = self.rg(&[p, v]);
        Ok(self.push(out, Op::AttnApply { p, v, dims }, rg))
    }

    /// Mean squared error, optionally restricted by nonnegative per-element
    /// weights (0 excludes an element). An empty selection yields 0.
    pub fn mse(&mut self, a: Var, b: Var, weights: Option<Vec<f32>>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(format!("mse {:?} vs {:?}", av.shape(), bv.shape())));
        }
        if let Some(w) = &weights {
            if w.len() != av.numel() {
                return Err(dim_err("mse weights size"));
            }
        }
        let count = weights.as_ref().map_or(av.numel() as f32, |w| w.iter().sum());
        let mut total = 0.0f32;
        for i in 0..av.numel() {
            let d = av.data[i] - bv.data[i];
            let w = weights.as_ref().map_or(1.0, |w| w[i]);
            total += w * d * d;
        }
        let loss = if count > 0.0 { total / count } else { 0.0 };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { a, b, weights, count }, rg))
    }

    /// `−Σ p·log softmax(z)` over the last axis, averaged over rows with
    /// optional per-row weights.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Var, row_weights: Option<Vec<f32>>) -> Result<Var> {
        let (zv, pv) = (self.value(logits), self.value(target));
        if zv.shape() != pv.shape() {
            return Err(dim_err(format!(
                "soft_cross_entropy {:?} vs {:?}",
                zv.shape(),
                pv.shape()
            )));
        }
        let (rows, cols) = (zv.rows(), zv.cols());
        if let Some(w) = &row_weights {
            if w.len() != rows {
                return Err(dim_err("soft_cross_entropy row weights size"));
            }
        }
        let log_probs = log_softmax_rows(zv.data(), cols);
        let count = row_weights.as_ref().map_or(rows as f32, |w| w.iter().sum());
        let mut total = 0.0f32;
        for r in 0..rows {
            let w = row_weights.as_ref().map_or(1.0, |w| w[r]);
            if w == 0.0 {
                continue;
            }
            let row: f32 = (0..cols)
                .map(|c| pv.data[r * cols + c] * log_probs[r * cols + c])
                .sum();
            total -= w * row;
        }
        let loss = if count > 0.0 { total / count } else { 0.0 };
        let rg = self.rg(&[logits, target]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy { logits, target, log_probs, row_weights, count },
            rg,
        ))
    }

    /// Hard-label cross entropy over rows; negative labels are ignored.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64]) -> Result<Var> {
        let zv = self.value(logits);
        let (rows, cols) = (zv.rows(), zv.cols());
        if labels.len() != rows {
            return Err(dim_err(format!("{} labels for {rows} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols as i64) {
            return Err(Error::Contract(format!("label {bad} outside {cols} classes")));
        }
        let log_probs = log_softmax_rows(zv.data(), cols);
        let mut count = 0.0f32;
        let mut total = 0.0f32;
        for (r, &l) in labels.iter().enumerate() {
            if l >= 0 {
                count += 1.0;
                total -= log_probs[r * cols + l as usize];
            }
        }
        let loss = if count > 0.0 { total / count } else { 0.0 };
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs, count },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), Op::Sum { a }, rg)
    }

    /// Weighted sum `Σ wᵢ·sᵢ` of scalars.
    pub fn combine(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(dim_err(format!("combine expects scalars, got {:?}", t.shape())));
            }
            total += w * t.data[0];
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::scalar(total), Op::Combine { terms: terms.to_vec() }, rg))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every reachable leaf that requires a
    /// gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn slot<'s>(&self, adj: &'s mut [Option<Vec<f32>>], v: Var) -> Option<&'s mut Vec<f32>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f32], adj: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = out.cols();
                if let Some(da) = self.slot(adj, *a) {
                    if *trans_b {
                        gemm_nn(m, n, k, g, bv.data(), da);
                    } else {
                        gemm_nt(m, n, k, g, bv.data(), da);
                    }
                }
                if let Some(db) = self.slot(adj, *b) {
                    if *trans_b {
                        gemm_tn(n, m, k, g, av.data(), db);
                    } else {
                        gemm_tn(k, m, n, av.data(), g, db);
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = self.slot(adj, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(db) = self.slot(adj, *b) {
                    let n = db.len();
                    for (j, x) in g.iter().enumerate() {
                        db[j % n] += x;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = bv.numel();
                if let Some(da) = self.slot(adj, *a) {
                    for (j, x) in g.iter().enumerate() {
                        da[j] += x * bv.data[j % n];
                    }
                }
                if let Some(db) = self.slot(adj, *b) {
                    for (j, x) in g.iter().enumerate() {
                        db[j % n] += x * av.data[j];
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(da) = self.slot(adj, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x * factor);
                }
            }
            Op::AddConst { a } | Op::Reshape { a } => {
                if let Some(da) = self.slot(adj, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::Softmax { a } => {
                let cols = out.cols();
                if let Some(da) = self.slot(adj, *a) {
                    for ((y, gy), d) in out
                        .data()
                        .chunks_exact(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(da.chunks_exact_mut(cols))
                    {
                        let dot: f32 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        for c in 0..cols {
                            d[c] += y[c] * (gy[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain).data();
                let cols = out.cols();
                let rows = out.rows();
                if let Some(dg) = self.slot(adj, *gain) {
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(db) = self.slot(adj, *bias) {
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                }
                if let Some(dx) = self.slot(adj, *x) {
                    let n = cols as f32;
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for c in 0..cols {
                            let v = g[r * cols + c] * gv[c];
                            dxhat[c] = v;
                            s1 += v;
                            s2 += v * xhat[r * cols + c];
                        }
                        for c in 0..cols {
                            dx[r * cols + c] +=
                                rstd[r] / n * (n * dxhat[c] - s1 - xhat[r * cols + c] * s2);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let av = self.value(*a);
                if let Some(da) = self.slot(adj, *a) {
                    for (j, x) in g.iter().enumerate() {
                        da[j] += x * gelu_grad(av.data[j]);
                    }
                }
            }
            Op::Tanh { a } => {
                if let Some(da) = self.slot(adj, *a) {
                    for (j, x) in g.iter().enumerate() {
                        let y = out.data[j];
                        da[j] += x * (1.0 - y * y);
                    }
                }
            }
            Op::Embed { table, ids } => {
                let d = out.cols();
                if let Some(dt) = self.slot(adj, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::SelectRows { a, rows } => {
                let d = out.cols();
                if let Some(da) = self.slot(adj, *a) {
                    for (r, &src) in rows.iter().enumerate() {
                        for c in 0..d {
                            da[src * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::SelectCol { a, col } => {
                let cols = self.value(*a).cols();
                if let Some(da) = self.slot(adj, *a) {
                    for (r, x) in g.iter().enumerate() {
                        da[r * cols + col] += x;
                    }
                }
            }
            Op::Dropout { a, scale } => {
                if let Some(da) = self.slot(adj, *a) {
                    for (j, x) in g.iter().enumerate() {
                        da[j] += x * scale[j];
                    }
                }
            }
            Op::AttnScores { q, k, dims } => {
                let factor = 1.0 / (dims.head_dim as f32).sqrt();
                let gs: Vec<f32> = g.iter().map(|x| x * factor).collect();
                let (qv, kv) = (self.value(*q).data(), self.value(*k).data());
                let (l, w, dh) = (dims.len, dims.width(), dims.head_dim);
                if let Some(dq) = self.slot(adj, *q) {
                    for b in 0..dims.batch {
                        for h in 0..dims.heads {
                            let (rb, sb) = (dims.row_block(b, h), dims.score_block(b, h));
                            strided(l, l, dh, &gs[sb..], (l, 1), &kv[rb..], (w, 1), &mut dq[rb..], (w, 1));
                        }
                    }
                }
                if let Some(dk) = self.slot(adj, *k) {
                    for b in 0..dims.batch {
                        for h in 0..dims.heads {
                            let (rb, sb) = (dims.row_block(b, h), dims.score_block(b, h));
                            strided(l, l, dh, &gs[sb..], (1, l), &qv[rb..], (w, 1), &mut dk[rb..], (w, 1));
                        }
                    }
                }
            }
            Op::AttnApply { p, v, dims } => {
                let (pv, vv) = (self.value(*p).data(), self.value(*v).data());
                let (l, w, dh) = (dims.len, dims.width(), dims.head_dim);
                if let Some(dp) = self.slot(adj, *p) {
                    for b in 0..dims.batch {
                        for h in 0..dims.heads {
                            let (rb, sb) = (dims.row_block(b, h), dims.score_block(b, h));
                            strided(l, dh, l, &g[rb..], (w, 1), &vv[rb..], (1, w), &mut dp[sb..], (l, 1));
                        }
                    }
                }
                if let Some(dv) = self.slot(adj, *v) {
                    for b in 0..dims.batch {
                        for h in 0..dims.heads {
                            let (rb, sb) = (dims.row_block(b, h), dims.score_block(b, h));
                            strided(l, l, dh, &pv[sb..], (1, l), &g[rb..], (w, 1), &mut dv[rb..], (w, 1));
                        }
                    }
                }
            }
            Op::Mse { a, b, weights, count } => {
                if *count <= 0.0 {
                    return;
                }
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let coef = 2.0 * g[0] / count;
                let diff = |j: usize| {
                    let w = weights.as_ref().map_or(1.0, |w| w[j]);
                    w * coef * (av[j] - bv[j])
                };
                if let Some(da) = self.slot(adj, *a) {
                    for (j, d) in da.iter_mut().enumerate() {
                        *d += diff(j);
                    }
                }
                if let Some(db) = self.slot(adj, *b) {
                    for (j, d) in db.iter_mut().enumerate() {
                        *d -= diff(j);
                    }
                }
            }
            Op::SoftCrossEntropy { logits, target, log_probs, row_weights, count } => {
                if *count <= 0.0 {
                    return;
                }
                let pv = self.value(*target).data();
                let cols = self.value(*logits).cols();
                let rows = log_probs.len() / cols;
                let coef = g[0] / count;
                if let Some(dz) = self.slot(adj, *logits) {
                    for r in 0..rows {
                        let w = row_weights.as_ref().map_or(1.0, |w| w[r]);
                        if w == 0.0 {
                            continue;
                        }
                        let mass: f32 = pv[r * cols..(r + 1) * cols].iter().sum();
                        for c in 0..cols {
                            let j = r * cols + c;
                            dz[j] += w * coef * (log_probs[j].exp() * mass - pv[j]);
                        }
                    }
                }
                if let Some(dp) = self.slot(adj, *target) {
                    for r in 0..rows {
                        let w = row_weights.as_ref().map_or(1.0, |w| w[r]);
                        for c in 0..cols {
                            let j = r * cols + c;
                            dp[j] -= w * coef * log_probs[j];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs, count } => {
                if *count <= 0.0 {
                    return;
                }
                let cols = self.value(*logits).cols();
                let coef = g[0] / count;
                if let Some(dz) = self.slot(adj, *logits) {
                    for (r, &l) in labels.iter().enumerate() {
                        if l < 0 {
                            continue;
                        }
                        for c in 0..cols {
                            let j = r * cols + c;
                            let onehot = if c as i64 == l { 1.0 } else { 0.0 };
                            dz[j] += coef * (probs[j] - onehot);
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(da) = self.slot(adj, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Combine { terms } => {
                for &(v, w) in terms {
                    if let Some(dv) = self.slot(adj, v) {
                        dv[0] += w * g[0];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, -2.0, 3.5, 0.25]));
        let l = tape.mse(a, a, None).unwrap();
        assert_eq!(tape.item(l), 0.0);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a: Vec<f32> = (0..6).map(|i| i as f32 * 0.5 - 1.0).collect();
        let b: Vec<f32> = (0..12).map(|i| (i as f32).sin()).collect();
        let mut naive = vec![0.0f32; 8];
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    naive[i * 4 + j] += a[i * 3 + k] * b[k * 4 + j];
                }
            }
        }
        let mut tape = Tape::new();
        let av = tape.constant(t(&[2, 3], &a));
        let bv = tape.constant(t(&[3, 4], &b));
        let c = tape.matmul(av, bv, false).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 4]);
        for (x, y) in tape.value(c).data().iter().zip(&naive) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(tape.matmul(a, b, false), Err(Error::Dimension(_))));
    }

    #[test]
    fn empty_tensor_is_domain_error() {
        assert!(matches!(Tensor::new(vec![0, 3], vec![]), Err(Error::Domain(_))));
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(tape.embed(table, &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn sum_gives_all_ones_gradient() {
        let w = t(&[3], &[0.3, -1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.param(&w, true);
        let l = tape.sum(v);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_gradient_uses_mean_convention() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let zero = tape.constant(Tensor::zeros(&[2]));
        let l = tape.mse(w, zero, None).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let l = tape.sum(w);
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 2.0]);
        tape.zero_grads();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn backward_of_non_scalar_is_contract_error() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn masked_keys_get_exactly_zero_attention() {
        let mut tape = Tape::new();
        let s = tape.constant(t(&[1, 3], &[0.3, 8.0, -1.0]));
        let biased = tape.add_const(s, &t(&[1, 3], &[0.0, -1e4, 0.0])).unwrap();
        let p = tape.softmax(biased);
        assert_eq!(tape.value(p).data()[1], 0.0);
        let total: f32 = tape.value(p).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn soft_cross_entropy_at_matched_logits_is_entropy() {
        let z = [0.2f32, -1.0, 1.7];
        let mut tape = Tape::new();
        let zs = tape.constant(t(&[1, 3], &z));
        let p = tape.softmax(zs);
        let ce = tape.soft_cross_entropy(zs, p, None).unwrap();
        let probs = tape.value(p).data().to_vec();
        let entropy: f32 = -probs.iter().map(|q| q * q.ln()).sum::<f32>();
        assert!((tape.item(ce) - entropy).abs() < 1e-6);
    }
}
