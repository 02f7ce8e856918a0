//! Scaled dot-product and multi-head self-attention with padding masks.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;
use rand::rngs::StdRng;

/// Additive logit offset applied to masked key positions.
pub const MASK_LOGIT: f64 = -1e9;

/// Which width the attention logits are scaled by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleMode {
    /// 1/sqrt(d/h), the multi-head formulation adopted by reference.
    #[default]
    PerHead,
    /// 1/sqrt(d), the literal single-equation reading.
    FullD,
}

impl ScaleMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScaleMode::PerHead => "per_head",
            ScaleMode::FullD => "full_d",
        }
    }

    pub fn parse(s: &str) -> crate::Result<Self> {
        match s {
            "per_head" => Ok(ScaleMode::PerHead),
            "full_d" => Ok(ScaleMode::FullD),
            other => Err(crate::Error::Config(format!("unknown scale_mode '{other}'"))),
        }
    }
}

/// Per-(sentence, position) validity flags for a padded batch.
#[derive(Debug, Clone)]
pub struct PaddingMask {
    rows: Vec<Vec<bool>>,
}

impl PaddingMask {
    pub fn rows(&self) -> &[Vec<bool>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.rows[i]
    }
}

/// Positions at or beyond each sentence's length are flagged invalid.
pub fn build_padding_mask(lengths: &[usize], max_len: usize) -> Result<PaddingMask> {
    let mut rows = Vec::with_capacity(lengths.len());
    for (i, &len) in lengths.iter().enumerate() {
        if len == 0 {
            return Err(Error::Data(format!("sentence {i} has zero length")));
        }
        if len > max_len {
            return Err(Error::Data(format!(
                "sentence {i} length {len} exceeds max_len {max_len}"
            )));
        }
        rows.push((0..max_len).map(|p| p < len).collect());
    }
    Ok(PaddingMask { rows })
}

/// softmax(Q K^T / scale) V with masked keys receiving (near) zero weight.
/// `key_valid`, when present, must have one flag per key row and at least
/// one valid key. `attn_keep < 1` applies dropout to the weight matrix in
/// train mode.
pub fn scaled_dot_product_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    key_valid: Option<&[bool]>,
    scale: T,
    attn_keep: T,
    train: bool,
    rng: &mut StdRng,
) -> Result<Var> {
    let (nq, _) = g.value(q).dims2()?;
    let (nk, _) = g.value(k).dims2()?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, T::one() / scale);
    let logits = match key_valid {
        Some(valid) => {
            if valid.len() != nk {
                return Err(Error::Shape(format!(
                    "mask has {} flags for {} keys",
                    valid.len(),
                    nk
                )));
            }
            if !valid.iter().any(|&f| f) {
                return Err(Error::Numeric("attention row with all keys masked".into()));
            }
            let mut offs = vec![T::zero(); nq * nk];
            for (j, &ok) in valid.iter().enumerate() {
                if !ok {
                    for i in 0..nq {
                        offs[i * nk + j] = T::from_f64(MASK_LOGIT);
                    }
                }
            }
            g.add_const(logits, &Tensor::new(vec![nq, nk], offs)?)?
        }
        None => logits,
    };
    let weights = g.softmax_lastdim(logits)?;
    let weights = g.dropout(weights, attn_keep, train, rng)?;
    g.matmul(weights, v)
}

/// Attention weight matrix for inspection (no dropout).
pub fn attention_weights<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    key_valid: Option<&[bool]>,
    scale: T,
) -> Result<Var> {
    let (nq, dk) = g.value(q).dims2()?;
    let _ = nq;
    let _ = dk;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, T::one() / scale);
    let logits = match key_valid {
        Some(valid) => {
            let (nq, nk) = g.value(logits).dims2()?;
            let mut offs = vec![T::zero(); nq * nk];
            for (j, &ok) in valid.iter().enumerate() {
                if !ok {
                    for i in 0..nq {
                        offs[i * nk + j] = T::from_f64(MASK_LOGIT);
                    }
                }
            }
            g.add_const(logits, &Tensor::new(vec![nq, nk], offs)?)?
        }
        None => logits,
    };
    g.softmax_lastdim(logits)
}

/// Per-head projection weights plus the output map, already bound into a
/// graph as variables.
#[derive(Debug, Clone)]
pub struct MultiHeadWeights {
    /// One `[d, d/h]` query/key/value projection per head.
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    /// `[d, d]` output map mixing channels across heads.
    pub w_out: Var,
}

/// Multi-head self-attention: per-head linear maps to d/h, scaled
/// dot-product per head, concatenation, output map. Output shape `[n, d]`.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    weights: &MultiHeadWeights,
    key_valid: Option<&[bool]>,
    scale_mode: ScaleMode,
    attn_keep: T,
    train: bool,
    rng: &mut StdRng,
) -> Result<Var> {
    let (_, d) = g.value(x).dims2()?;
    let h = weights.wq.len();
    if h == 0 || weights.wk.len() != h || weights.wv.len() != h {
        return Err(Error::Shape(format!(
            "inconsistent head counts: {}/{}/{}",
            weights.wq.len(),
            weights.wk.len(),
            weights.wv.len()
        )));
    }
    let scale = match scale_mode {
        ScaleMode::PerHead => T::from_f64(((d / h) as f64).sqrt()),
        ScaleMode::FullD => T::from_f64((d as f64).sqrt()),
    };
    let mut heads = Vec::with_capacity(h);
    for i in 0..h {
        let q = g.matmul(x, weights.wq[i])?;
        let k = g.matmul(x, weights.wk[i])?;
        let v = g.matmul(x, weights.wv[i])?;
        heads.push(scaled_dot_product_attention(
            g, q, k, v, key_valid, scale, attn_keep, train, rng,
        )?);
    }
    let concat = g.concat_cols(&heads)?;
    g.matmul(concat, weights.w_out)
}
