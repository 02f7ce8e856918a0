//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! Every forward pass builds a fresh [`Graph`] (a tape of executed
//! operations). Tape order is topological order, so the backward sweep is a
//! single reverse walk. Leaves flagged `requires_grad` receive gradients;
//! a graph can be swept at most once.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use rand::rngs::StdRng;
use rand::Rng;

/// Handle to a node in one particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    AddBias { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: T },
    AddConst { a: usize },
    MulConst { a: usize, c: Tensor<T> },
    Relu { a: usize },
    Sigmoid { a: usize },
    Tanh { a: usize },
    SoftmaxLastDim { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: T },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    Sum { a: usize },
    Gather { table: usize, ids: Vec<usize> },
    Conv1dSame { x: usize, w: usize, k: usize },
    SmoothedCeSum {
        logits: usize,
        probs: Vec<T>,
        gold: Vec<usize>,
        valid: Vec<bool>,
        eps: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    swept: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

// y[m,n] = a[m,k] . b[k,n]
fn mm_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let yrow = &mut y[i * n..(i + 1) * n];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                yrow[j] = yrow[j] + av * brow[j];
            }
        }
    }
    y
}

// y[m,n] = a[m,k] . b[n,k]^T
fn mm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for p in 0..k {
                s = s + arow[p] * brow[p];
            }
            y[i * n + j] = s;
        }
    }
    y
}

// y[m,n] = a[k,m]^T . b[k,n]
fn mm_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == T::zero() {
                continue;
            }
            let yrow = &mut y[i * n..(i + 1) * n];
            for j in 0..n {
                yrow[j] = yrow[j] + av * brow[j];
            }
        }
    }
    y
}

fn axpy<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            swept: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on a node by the last backward sweep.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape matches value")
        })
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let y = mm_nn(self.value(a).data(), self.value(b).data(), m, ka, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], y)?,
            rg,
            Op::Matmul { a: a.0, b: b.0 },
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut y = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                y[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], y)?, rg, Op::Transpose { a: a.0 }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let y: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &z)| x + z)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, y)?, rg, Op::Add { a: a.0, b: b.0 }))
    }

    /// Broadcast-add a `[d]` bias over the rows of an `[n, d]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2()?;
        if self.value(bias).shape() != [d] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match row width {}",
                self.value(bias).shape(),
                d
            )));
        }
        let bv = self.value(bias).data().to_vec();
        let mut y = self.value(a).data().to_vec();
        for i in 0..n {
            for j in 0..d {
                y[i * d + j] = y[i * d + j] + bv[j];
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(
            Tensor::new(vec![n, d], y)?,
            rg,
            Op::AddBias { a: a.0, b: bias.0 },
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let y: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &z)| x * z)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, y)?, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let y = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(y, rg, Op::Scale { a: a.0, c })
    }

    /// Add a constant tensor (no gradient flows to it).
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        if self.value(a).shape() != c.shape() {
            return Err(Error::Shape(format!(
                "add_const shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                c.shape()
            )));
        }
        let y: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&x, &z)| x + z)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, y)?, rg, Op::AddConst { a: a.0 }))
    }

    /// Multiply elementwise by a constant tensor (dropout masks, loss masks).
    pub fn mul_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        if self.value(a).shape() != c.shape() {
            return Err(Error::Shape(format!(
                "mul_const shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                c.shape()
            )));
        }
        let y: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&x, &z)| x * z)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(shape, y)?,
            rg,
            Op::MulConst { a: a.0, c: c.clone() },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(a);
        self.push(y, rg, Op::Relu { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = T::one();
        let y = self.value(a).map(|v| one / (one + (-v).exp()));
        let rg = self.rg(a);
        self.push(y, rg, Op::Sigmoid { a: a.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|v| v.tanh());
        let rg = self.rg(a);
        self.push(y, rg, Op::Tanh { a: a.0 })
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let w = t.last_dim();
        if w == 0 {
            return Err(Error::Shape("softmax over empty last dimension".into()));
        }
        if !t.all_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let mut y = t.data().to_vec();
        softmax_rows_inplace(&mut y, w);
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, y)?, rg, Op::SoftmaxLastDim { a: a.0 }))
    }

    /// Normalize each last-dimension slice to zero mean / unit variance,
    /// then apply elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let t = self.value(x);
        let d = t.last_dim();
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias must be [{}], got {:?} and {:?}",
                d,
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut y = t.data().to_vec();
        let dt = T::from_f64(d as f64);
        for row in y.chunks_mut(d) {
            let mut mean = T::zero();
            for v in row.iter() {
                mean = mean + *v;
            }
            mean = mean / dt;
            let mut var = T::zero();
            for v in row.iter() {
                let c = *v - mean;
                var = var + c * c;
            }
            var = var / dt;
            let inv = T::one() / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[j] + b[j];
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, y)?,
            rg,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
        ))
    }

    /// Inverted dropout: kept entries scaled by 1/keep. Identity when not
    /// training or when keep == 1.
    pub fn dropout(&mut self, a: Var, keep: T, train: bool, rng: &mut StdRng) -> Result<Var> {
        if keep <= T::zero() || keep > T::one() {
            return Err(Error::Config(format!(
                "dropout keep probability must be in (0, 1], got {keep}"
            )));
        }
        if !train || keep == T::one() {
            return Ok(a);
        }
        let kf = keep.to_f64();
        let inv = T::one() / keep;
        let mask: Vec<T> = (0..self.value(a).numel())
            .map(|_| {
                if rng.gen::<f64>() < kf {
                    inv
                } else {
                    T::zero()
                }
            })
            .collect();
        let mask = Tensor::new(self.value(a).shape().to_vec(), mask)?;
        self.mul_const(a, &mask)
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of zero parts".into()));
        }
        let (n, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (np, w) = self.value(p).dims2()?;
            if np != n {
                return Err(Error::Shape(format!(
                    "concat_cols row counts differ: {} vs {}",
                    n, np
                )));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut y = vec![T::zero(); n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..n {
                y[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![n, total], y)?,
            rg,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    /// Stack matrices with equal widths along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of zero parts".into()));
        }
        let (_, w) = self.value(parts[0]).dims2()?;
        let mut total = 0;
        for &p in parts {
            let (np, wp) = self.value(p).dims2()?;
            if wp != w {
                return Err(Error::Shape(format!(
                    "concat_rows widths differ: {} vs {}",
                    w, wp
                )));
            }
            total += np;
        }
        let mut y = Vec::with_capacity(total * w);
        for &p in parts {
            y.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![total, w], y)?,
            rg,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, w) = self.value(a).dims2()?;
        if start + len > n {
            return Err(Error::Shape(format!(
                "slice_rows {}..{} out of {} rows",
                start,
                start + len,
                n
            )));
        }
        let y = self.value(a).data()[start * w..(start + len) * w].to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![len, w], y)?,
            rg,
            Op::SliceRows { a: a.0, start },
        ))
    }

    /// Row `t` of a matrix as a `[1, w]` tensor.
    pub fn row(&mut self, a: Var, t: usize) -> Result<Var> {
        self.slice_rows(a, t, 1)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, w) = self.value(a).dims2()?;
        if start + len > w {
            return Err(Error::Shape(format!(
                "slice_cols {}..{} out of width {}",
                start,
                start + len,
                w
            )));
        }
        let src = self.value(a).data();
        let mut y = Vec::with_capacity(n * len);
        for i in 0..n {
            y.extend_from_slice(&src[i * w + start..i * w + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![n, len], y)?,
            rg,
            Op::SliceCols { a: a.0, start },
        ))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(a).data() {
            s = s + v;
        }
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Sum { a: a.0 })
    }

    /// Look up rows of an embedding table by id.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, e) = self.value(table).dims2()?;
        for &id in ids {
            if id >= v {
                return Err(Error::Data(format!(
                    "gather id {} out of table size {}",
                    id, v
                )));
            }
        }
        let src = self.value(table).data();
        let mut y = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            y.extend_from_slice(&src[id * e..(id + 1) * e]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), e], y)?,
            rg,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// 1-D convolution over the rows of `x` with SAME zero padding.
    /// `w` holds the `k` stacked `[d, d_out]` filter slices as `[k*d, d_out]`.
    pub fn conv1d_same(&mut self, x: Var, w: Var, k: usize) -> Result<Var> {
        if k % 2 == 0 {
            return Err(Error::Config(format!("filter width must be odd, got {k}")));
        }
        let (n, d) = self.value(x).dims2()?;
        let (kd, dout) = self.value(w).dims2()?;
        if kd != k * d {
            return Err(Error::Shape(format!(
                "conv filter shape {:?} does not match k={} x d={}",
                self.value(w).shape(),
                k,
                d
            )));
        }
        let pad = (k - 1) / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut y = vec![T::zero(); n * dout];
        for t in 0..n {
            for o in 0..k {
                let src = t as isize + o as isize - pad as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let xrow = &xv[src as usize * d..(src as usize + 1) * d];
                for c in 0..d {
                    let xvc = xrow[c];
                    if xvc == T::zero() {
                        continue;
                    }
                    let wrow = &wv[(o * d + c) * dout..(o * d + c + 1) * dout];
                    let yrow = &mut y[t * dout..(t + 1) * dout];
                    for j in 0..dout {
                        yrow[j] = yrow[j] + xvc * wrow[j];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::new(vec![n, dout], y)?,
            rg,
            Op::Conv1dSame { x: x.0, w: w.0, k },
        ))
    }

    /// Label-smoothed cross-entropy summed over valid positions.
    /// Target per position is `(1-eps)*onehot + eps/K`. Returns the scalar
    /// sum; divide by the valid-token count for a mean.
    pub fn smoothed_ce_sum(
        &mut self,
        logits: Var,
        gold: &[usize],
        valid: &[bool],
        eps: T,
    ) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if gold.len() != n || valid.len() != n {
            return Err(Error::Shape(format!(
                "gold/valid length {}/{} does not match {} rows",
                gold.len(),
                valid.len(),
                n
            )));
        }
        if eps < T::zero() || eps >= T::one() {
            return Err(Error::Config(format!(
                "label smoothing must be in [0, 1), got {eps}"
            )));
        }
        for (t, &gid) in gold.iter().enumerate() {
            if valid[t] && gid >= k {
                return Err(Error::Data(format!(
                    "gold id {} out of {} classes at position {}",
                    gid, k, t
                )));
            }
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_rows_inplace(&mut probs, k);
        let unif = eps / T::from_f64(k as f64);
        let conf = T::one() - eps;
        let mut loss = T::zero();
        for t in 0..n {
            if !valid[t] {
                continue;
            }
            let row = &probs[t * k..(t + 1) * k];
            for (j, &p) in row.iter().enumerate() {
                let q = if j == gold[t] { conf + unif } else { unif };
                if q > T::zero() {
                    loss = loss - q * p.ln();
                }
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SmoothedCeSum {
                logits: logits.0,
                probs,
                gold: gold.to_vec(),
                valid: valid.to_vec(),
                eps,
            },
        ))
    }

    /// Mean label-smoothed cross-entropy over valid positions.
    pub fn smoothed_ce_mean(
        &mut self,
        logits: Var,
        gold: &[usize],
        valid: &[bool],
        eps: T,
    ) -> Result<Var> {
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::Data("no valid positions in loss".into()));
        }
        let s = self.smoothed_ce_sum(logits, gold, valid, eps)?;
        Ok(self.scale(s, T::one() / T::from_f64(count as f64)))
    }

    /// Reverse sweep from a scalar loss. Leaves with `requires_grad` end up
    /// with their gradient populated; a second sweep on the same graph is
    /// rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.swept {
            return Err(Error::Usage(
                "backward called twice on the same graph".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.swept = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let (before, after) = self.nodes.split_at_mut(i);
            let node = &mut after[0];
            let gy = node.grad.as_ref().unwrap().clone();
            let ensure = |nodes: &mut [Node<T>], idx: usize| {
                if nodes[idx].grad.is_none() {
                    nodes[idx].grad = Some(vec![T::zero(); nodes[idx].value.numel()]);
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = before[*a].value.dims2()?;
                    let (_, n) = before[*b].value.dims2()?;
                    if before[*a].requires_grad {
                        let da = mm_nt(&gy, before[*b].value.data(), m, n, k);
                        ensure(before, *a);
                        axpy(before[*a].grad.as_mut().unwrap(), &da);
                    }
                    if before[*b].requires_grad {
                        let db = mm_tn(before[*a].value.data(), &gy, k, m, n);
                        ensure(before, *b);
                        axpy(before[*b].grad.as_mut().unwrap(), &db);
                    }
                }
                Op::Transpose { a } => {
                    if before[*a].requires_grad {
                        let (m, n) = before[*a].value.dims2()?;
                        ensure(before, *a);
                        let ga = before[*a].grad.as_mut().unwrap();
                        for i2 in 0..m {
                            for j in 0..n {
                                ga[i2 * n + j] = ga[i2 * n + j] + gy[j * m + i2];
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for idx in [*a, *b] {
                        if before[idx].requires_grad {
                            ensure(before, idx);
                            axpy(before[idx].grad.as_mut().unwrap(), &gy);
                        }
                    }
                }
                Op::AddBias { a, b } => {
                    let (n, d) = node.value.dims2()?;
                    if before[*a].requires_grad {
                        ensure(before, *a);
                        axpy(before[*a].grad.as_mut().unwrap(), &gy);
                    }
                    if before[*b].requires_grad {
                        ensure(before, *b);
                        let gb = before[*b].grad.as_mut().unwrap();
                        for i2 in 0..n {
                            for j in 0..d {
                                gb[j] = gb[j] + gy[i2 * d + j];
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if before[*a].requires_grad {
                        let other: Vec<T> = before[*b]
                            .value
                            .data()
                            .iter()
                            .zip(&gy)
                            .map(|(&v, &g)| v * g)
                            .collect();
                        ensure(before, *a);
                        axpy(before[*a].grad.as_mut().unwrap(), &other);
                    }
                    if before[*b].requires_grad {
                        let other: Vec<T> = before[*a]
                            .value
                            .data()
                            .iter()
                            .zip(&gy)
                            .map(|(&v, &g)| v * g)
                            .collect();
                        ensure(before, *b);
                        axpy(before[*b].grad.as_mut().unwrap(), &other);
                    }
                }
                Op::Scale { a, c } => {
                    if before[*a].requires_grad {
                        let da: Vec<T> = gy.iter().map(|&g| g * *c).collect();
                        ensure(before, *a);
                        axpy(before[*a].grad.as_mut().unwrap(), &da);
                    }
                }
                Op::AddConst { a } => {
                    if before[*a].requires_grad {
                        ensure(before, *a);
                        axpy(before[*a].grad.as_mut().unwrap(), &gy);
                    }
                }
                Op::MulConst { a, c } => {
                    if before[*a].requires_grad {
                        let da: Vec<T> = gy.iter().zip(c.data()).map(|(&g, &m)| g * m).collect();
                        ensure(before, *a);
                        axpy(before[*a].grad.as_mut().unwrap(), &da);
                    }
                }
                Op::Relu { a } => {
                    if before[*a].requires_grad {
                        let da: Vec<T> = before[*a]
                            .value
                            .data()
                            .iter()
                            .zip(&gy)
                            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                            .collect();
                        ensure(before, *a);
                        axpy(before[*a].grad.as_mut().unwrap(), &da);
                    }
                }
                Op::Sigmoid { a } => {
                    if before[*a].requires_grad {
                        let da: Vec<T> = node
                            .value
                            .data()
                            .iter()
                            .zip(&gy)
                            .map(|(&y, &g)| g * y * (T::one() - y))
                            .collect();
                        ensure(before, *a);
                        axpy(before[*a].grad.as_mut().unwrap(), &da);
                    }
                }
                Op::Tanh { a } => {
                    if before[*a].requires_grad {
                        let da: Vec<T> = node
                            .value
                            .data()
                            .iter()
                            .zip(&gy)
                            .map(|(&y, &g)| g * (T::one() - y * y))
                            .collect();
                        ensure(before, *a);
                        axpy(before[*a].grad.as_mut().unwrap(), &da);
                    }
                }
                Op::SoftmaxLastDim { a } => {
                    if before[*a].requires_grad {
                        let w = node.value.last_dim();
                        let y = node.value.data();
                        let mut da = vec![T::zero(); y.len()];
                        for r in 0..y.len() / w {
                            let yr = &y[r * w..(r + 1) * w];
                            let gr = &gy[r * w..(r + 1) * w];
                            let mut dot = T::zero();
                            for j in 0..w {
                                dot = dot + yr[j] * gr[j];
                            }
                            for j in 0..w {
                                da[r * w + j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        ensure(before, *a);
                        axpy(before[*a].grad.as_mut().unwrap(), &da);
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let d = node.value.last_dim();
                    let dt = T::from_f64(d as f64);
                    let xv = before[*x].value.data();
                    let gv = before[*gain].value.data();
                    let rows = xv.len() / d;
                    let mut dx = vec![T::zero(); xv.len()];
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &gy[r * d..(r + 1) * d];
                        let mut mean = T::zero();
                        for &v in xr {
                            mean = mean + v;
                        }
                        mean = mean / dt;
                        let mut var = T::zero();
                        for &v in xr {
                            let c = v - mean;
                            var = var + c * c;
                        }
                        var = var / dt;
                        let inv = T::one() / (var + *eps).sqrt();
                        // xhat_j = (x_j - mean) * inv
                        let mut sum_dyg = T::zero();
                        let mut sum_dyg_xhat = T::zero();
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * inv;
                            let dyg = gr[j] * gv[j];
                            sum_dyg = sum_dyg + dyg;
                            sum_dyg_xhat = sum_dyg_xhat + dyg * xhat;
                            dg[j] = dg[j] + gr[j] * xhat;
                            db[j] = db[j] + gr[j];
                        }
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * inv;
                            let dyg = gr[j] * gv[j];
                            dx[r * d + j] =
                                inv * (dyg - sum_dyg / dt - xhat * sum_dyg_xhat / dt);
                        }
                    }
                    if before[*x].requires_grad {
                        ensure(before, *x);
                        axpy(before[*x].grad.as_mut().unwrap(), &dx);
                    }
                    if before[*gain].requires_grad {
                        ensure(before, *gain);
                        axpy(before[*gain].grad.as_mut().unwrap(), &dg);
                    }
                    if before[*bias].requires_grad {
                        ensure(before, *bias);
                        axpy(before[*bias].grad.as_mut().unwrap(), &db);
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = node.value.last_dim();
                    let n = node.value.numel() / total;
                    let mut off = 0;
                    for &p in parts {
                        let w = before[p].value.last_dim();
                        if before[p].requires_grad {
                            ensure(before, p);
                            let gp = before[p].grad.as_mut().unwrap();
                            for i2 in 0..n {
                                for j in 0..w {
                                    gp[i2 * w + j] = gp[i2 * w + j] + gy[i2 * total + off + j];
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = before[p].value.numel();
                        if before[p].requires_grad {
                            ensure(before, p);
                            axpy(before[p].grad.as_mut().unwrap(), &gy[off..off + len]);
                        }
                        off += len;
                    }
                }
                Op::SliceRows { a, start } => {
                    if before[*a].requires_grad {
                        let w = before[*a].value.last_dim();
                        ensure(before, *a);
                        let ga = before[*a].grad.as_mut().unwrap();
                        axpy(&mut ga[*start * w..*start * w + gy.len()], &gy);
                    }
                }
                Op::SliceCols { a, start } => {
                    if before[*a].requires_grad {
                        let w = before[*a].value.last_dim();
                        let len = node.value.last_dim();
                        let n = node.value.numel() / len;
                        ensure(before, *a);
                        let ga = before[*a].grad.as_mut().unwrap();
                        for i2 in 0..n {
                            for j in 0..len {
                                ga[i2 * w + *start + j] =
                                    ga[i2 * w + *start + j] + gy[i2 * len + j];
                            }
                        }
                    }
                }
                Op::Sum { a } => {
                    if before[*a].requires_grad {
                        let g = gy[0];
                        ensure(before, *a);
                        for v in before[*a].grad.as_mut().unwrap() {
                            *v = *v + g;
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    if before[*table].requires_grad {
                        let e = before[*table].value.last_dim();
                        ensure(before, *table);
                        let gt = before[*table].grad.as_mut().unwrap();
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..e {
                                gt[id * e + j] = gt[id * e + j] + gy[r * e + j];
                            }
                        }
                    }
                }
                Op::Conv1dSame { x, w, k } => {
                    let (n, dout) = node.value.dims2()?;
                    let d = before[*x].value.last_dim();
                    let pad = (*k - 1) / 2;
                    let xv = before[*x].value.data().to_vec();
                    let wv = before[*w].value.data().to_vec();
                    if before[*x].requires_grad {
                        ensure(before, *x);
                        let gx = before[*x].grad.as_mut().unwrap();
                        for t in 0..n {
                            let gr = &gy[t * dout..(t + 1) * dout];
                            for o in 0..*k {
                                let src = t as isize + o as isize - pad as isize;
                                if src < 0 || src >= n as isize {
                                    continue;
                                }
                                let src = src as usize;
                                for c in 0..d {
                                    let wrow = &wv[(o * d + c) * dout..(o * d + c + 1) * dout];
                                    let mut s = T::zero();
                                    for j in 0..dout {
                                        s = s + gr[j] * wrow[j];
                                    }
                                    gx[src * d + c] = gx[src * d + c] + s;
                                }
                            }
                        }
                    }
                    if before[*w].requires_grad {
                        ensure(before, *w);
                        let gw = before[*w].grad.as_mut().unwrap();
                        for t in 0..n {
                            let gr = &gy[t * dout..(t + 1) * dout];
                            for o in 0..*k {
                                let src = t as isize + o as isize - pad as isize;
                                if src < 0 || src >= n as isize {
                                    continue;
                                }
                                let xrow = &xv[src as usize * d..(src as usize + 1) * d];
                                for c in 0..d {
                                    let xvc = xrow[c];
                                    if xvc == T::zero() {
                                        continue;
                                    }
                                    let grow = &mut gw[(o * d + c) * dout..(o * d + c + 1) * dout];
                                    for j in 0..dout {
                                        grow[j] = grow[j] + xvc * gr[j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::SmoothedCeSum {
                    logits,
                    probs,
                    gold,
                    valid,
                    eps,
                } => {
                    if before[*logits].requires_grad {
                        let k = before[*logits].value.last_dim();
                        let unif = *eps / T::from_f64(k as f64);
                        let conf = T::one() - *eps;
                        let g = gy[0];
                        ensure(before, *logits);
                        let gl = before[*logits].grad.as_mut().unwrap();
                        for t in 0..gold.len() {
                            if !valid[t] {
                                continue;
                            }
                            for j in 0..k {
                                let q = if j == gold[t] { conf + unif } else { unif };
                                gl[t * k + j] = gl[t * k + j] + g * (probs[t * k + j] - q);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn softmax_rows_inplace<T: Real>(data: &mut [T], w: usize) {
    for row in data.chunks_mut(w) {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}
