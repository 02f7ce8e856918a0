//! The full encoder stack: embedding pipeline, position encoding, N
//! identical layers of (nonlinear sub-layer -> attention sub-layer), each
//! wrapped in residual + layer norm, plus the output projection.

use crate::attention::{multi_head_attention, MultiHeadWeights, ScaleMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::sublayers::{
    bilstm_sublayer, ffn_sublayer, glu_conv_sublayer, LstmDirection, SublayerKind,
};
use crate::tensor::Tensor;
use rand::rngs::StdRng;
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::HashMap;

pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Maximum sentence length when using a learned position-embedding table.
pub const MAX_POSITION_EMBEDDINGS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PosEncoding {
    /// Deterministic sinusoidal timing signal added to the embeddings.
    #[default]
    Timing,
    /// Learned position-embedding table, added like the timing signal.
    Embedding,
    None,
}

impl PosEncoding {
    pub fn as_str(&self) -> &'static str {
        match self {
            PosEncoding::Timing => "timing",
            PosEncoding::Embedding => "embedding",
            PosEncoding::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "timing" => Ok(PosEncoding::Timing),
            "embedding" => Ok(PosEncoding::Embedding),
            "none" => Ok(PosEncoding::None),
            other => Err(Error::Config(format!("unknown position encoding '{other}'"))),
        }
    }
}

/// How to read "variance 1/sqrt(d)" for the Gaussian initializer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitStdMode {
    /// variance = 1/sqrt(d), i.e. std = d^(-1/4)
    #[default]
    Variance,
    /// std = 1/sqrt(d)
    Std,
}

impl InitStdMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InitStdMode::Variance => "variance",
            InitStdMode::Std => "std",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(InitStdMode::Variance),
            "std" => Ok(InitStdMode::Std),
            other => Err(Error::Config(format!("unknown init_std_mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of encoder layers N.
    pub depth: usize,
    /// Model width d.
    pub width: usize,
    /// Attention head count h.
    pub heads: usize,
    /// FFN hidden width h_f.
    pub ffn_width: usize,
    pub sublayer: SublayerKind,
    pub pos_enc: PosEncoding,
    pub word_dim: usize,
    pub mask_dim: usize,
    /// Convolution filter width k.
    pub conv_width: usize,
    /// Keep probability for dropout before each residual add.
    pub residual_keep: f64,
    /// Keep probability for dropout on attention weights after softmax.
    pub attention_keep: f64,
    /// Keep probability for dropout on FFN hidden activations after ReLU.
    pub relu_keep: f64,
    pub label_smoothing: f64,
    pub scale_mode: ScaleMode,
    pub init_std_mode: InitStdMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 10,
            width: 200,
            heads: 8,
            ffn_width: 800,
            sublayer: SublayerKind::Ffn,
            pos_enc: PosEncoding::Timing,
            word_dim: 100,
            mask_dim: 100,
            conv_width: 3,
            residual_keep: 0.8,
            attention_keep: 0.9,
            relu_keep: 0.9,
            label_smoothing: 0.1,
            scale_mode: ScaleMode::PerHead,
            init_std_mode: InitStdMode::Variance,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.width == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.word_dim + self.mask_dim != self.width {
            return Err(Error::Config(format!(
                "word_dim {} + mask_dim {} must equal width {}",
                self.word_dim, self.mask_dim, self.width
            )));
        }
        if self.width % 2 != 0 {
            return Err(Error::Config("width must be even for the timing signal".into()));
        }
        if self.conv_width % 2 == 0 {
            return Err(Error::Config("conv_width must be odd".into()));
        }
        for (name, p) in [
            ("residual_keep", self.residual_keep),
            ("attention_keep", self.attention_keep),
            ("relu_keep", self.relu_keep),
        ] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1], got {p}")));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Channel 2i = sin(t / 10000^(2i/d)), channel 2i+1 = cos of the same angle.
pub fn timing_signal<T: Real>(t: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d];
    for i in 0..d / 2 {
        let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = T::from_f64(angle.sin());
        out[2 * i + 1] = T::from_f64(angle.cos());
    }
    out
}

fn timing_matrix<T: Real>(n: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * d);
    for t in 0..n {
        data.extend(timing_signal::<T>(t, d));
    }
    Tensor::new(vec![n, d], data).expect("timing matrix shape")
}

/// Random orthogonal matrix via QR of a Gaussian, with the usual sign
/// correction on the diagonal of R; non-square shapes use the QR of the
/// larger orientation, truncated.
pub fn orthogonal_init<T: Real>(rows: usize, cols: usize, rng: &mut StdRng) -> Tensor<T> {
    let (m, n, transpose) = if rows >= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    let gauss = nalgebra::DMatrix::<f64>::from_fn(m, n, |_, _| rng.sample(StandardNormal));
    let qr = gauss.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..m {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let mut data = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let v = if transpose { q[(j, i)] } else { q[(i, j)] };
            data[i * cols + j] = T::from_f64(v);
        }
    }
    Tensor::new(vec![rows, cols], data).expect("orthogonal shape")
}

/// One named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// The named weight set of the full model; count and shapes are a pure
/// function of the config and the vocabulary/tag inventory sizes.
#[derive(Debug, Clone)]
pub struct ModelParameters<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ModelParameters<T> {
    pub fn init(
        cfg: &ModelConfig,
        vocab_size: usize,
        num_tags: usize,
        rng: &mut StdRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let gstd = match cfg.init_std_mode {
            InitStdMode::Variance => (1.0 / (d as f64).sqrt()).sqrt(),
            InitStdMode::Std => 1.0 / (d as f64).sqrt(),
        };
        let mut params = ModelParameters {
            params: Vec::new(),
            index: HashMap::new(),
        };
        let gauss = |p: &mut Self, name: String, shape: Vec<usize>, rng: &mut StdRng| {
            p.add(name, Tensor::randn(shape, gstd, rng));
        };
        let ortho = |p: &mut Self, name: String, r: usize, c: usize, rng: &mut StdRng| {
            p.add(name, orthogonal_init(r, c, rng));
        };
        gauss(&mut params, "word_emb".into(), vec![vocab_size, cfg.word_dim], rng);
        gauss(&mut params, "mask_emb".into(), vec![2, cfg.mask_dim], rng);
        if cfg.pos_enc == PosEncoding::Embedding {
            gauss(
                &mut params,
                "pos_emb".into(),
                vec![MAX_POSITION_EMBEDDINGS, d],
                rng,
            );
        }
        for l in 0..cfg.depth {
            match cfg.sublayer {
                SublayerKind::Ffn => {
                    ortho(&mut params, format!("layer{l}.ffn.w1"), d, cfg.ffn_width, rng);
                    params.add(format!("layer{l}.ffn.b1"), Tensor::zeros(vec![cfg.ffn_width]));
                    ortho(&mut params, format!("layer{l}.ffn.w2"), cfg.ffn_width, d, rng);
                    params.add(format!("layer{l}.ffn.b2"), Tensor::zeros(vec![d]));
                }
                SublayerKind::CnnGlu => {
                    let k = cfg.conv_width;
                    ortho(&mut params, format!("layer{l}.conv.w"), k * d, d, rng);
                    params.add(format!("layer{l}.conv.wb"), Tensor::zeros(vec![d]));
                    ortho(&mut params, format!("layer{l}.conv.v"), k * d, d, rng);
                    params.add(format!("layer{l}.conv.vb"), Tensor::zeros(vec![d]));
                }
                SublayerKind::RnnBilstm => {
                    for dir in ["fwd", "bwd"] {
                        ortho(&mut params, format!("layer{l}.lstm.{dir}.wx"), d, 4 * d, rng);
                        ortho(&mut params, format!("layer{l}.lstm.{dir}.wh"), d, 4 * d, rng);
                        // forget-gate bias starts at 1, gate order [i,f,g,o]
                        let mut b = Tensor::zeros(vec![4 * d]);
                        for j in d..2 * d {
                            b.data_mut()[j] = T::one();
                        }
                        params.add(format!("layer{l}.lstm.{dir}.b"), b);
                    }
                }
                SublayerKind::None => {}
            }
            if cfg.sublayer != SublayerKind::None {
                params.add(format!("layer{l}.ln1.gain"), Tensor::filled(vec![d], T::one()));
                params.add(format!("layer{l}.ln1.bias"), Tensor::zeros(vec![d]));
            }
            let dh = d / cfg.heads;
            for hidx in 0..cfg.heads {
                ortho(&mut params, format!("layer{l}.attn.h{hidx}.wq"), d, dh, rng);
                ortho(&mut params, format!("layer{l}.attn.h{hidx}.wk"), d, dh, rng);
                ortho(&mut params, format!("layer{l}.attn.h{hidx}.wv"), d, dh, rng);
            }
            ortho(&mut params, format!("layer{l}.attn.w_out"), d, d, rng);
            params.add(format!("layer{l}.ln2.gain"), Tensor::filled(vec![d], T::one()));
            params.add(format!("layer{l}.ln2.bias"), Tensor::zeros(vec![d]));
        }
        gauss(&mut params, "w_o".into(), vec![d, num_tags], rng);
        Ok(params)
    }

    fn add(&mut self, name: String, value: Tensor<T>) {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, grad });
    }

    pub fn from_named(tensors: Vec<(String, Tensor<T>)>) -> Self {
        let mut p = ModelParameters {
            params: Vec::new(),
            index: HashMap::new(),
        };
        for (name, value) in tensors {
            p.add(name, value);
        }
        p
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Insert every parameter into a graph as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), requires_grad))
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    /// Add the graph's leaf gradients into the parameter accumulators.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, bound: &BoundParams) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(grad) = g.grad(v) {
                for (acc, &gv) in p.grad.data_mut().iter_mut().zip(grad.data()) {
                    *acc = *acc + gv;
                }
            }
        }
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U + Copy) -> ModelParameters<U> {
        ModelParameters::from_named(
            self.params
                .iter()
                .map(|p| (p.name.clone(), p.value.map(f)))
                .collect(),
        )
    }
}

/// Graph-bound views of every parameter, index-aligned with the store.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    /// Wrap already-created graph leaves as a parameter binding.
    pub fn from_parts(vars: Vec<Var>, names: Vec<String>) -> Self {
        let index = names
            .into_iter()
            .enumerate()
            .map(|(i, n)| (n, i))
            .collect();
        BoundParams { vars, index }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Per-position concatenation of word and mask embeddings.
pub fn embed_inputs<T: Real>(
    g: &mut Graph<T>,
    word_ids: &[usize],
    mask_bits: &[usize],
    bound: &BoundParams,
) -> Result<Var> {
    if word_ids.len() != mask_bits.len() {
        return Err(Error::Shape(format!(
            "word/mask sequence lengths differ: {} vs {}",
            word_ids.len(),
            mask_bits.len()
        )));
    }
    for (t, &m) in mask_bits.iter().enumerate() {
        if m > 1 {
            return Err(Error::Data(format!(
                "mask value {m} at position {t} is not 0/1"
            )));
        }
    }
    let words = g.gather(bound.var("word_emb")?, word_ids)?;
    let masks = g.gather(bound.var("mask_emb")?, mask_bits)?;
    g.concat_cols(&[words, masks])
}

/// Add the configured position signal to the embeddings.
pub fn add_position_signal<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &ModelConfig,
    bound: &BoundParams,
) -> Result<Var> {
    let (n, d) = g.value(x).dims2()?;
    match cfg.pos_enc {
        PosEncoding::Timing => g.add_const(x, &timing_matrix(n, d)),
        PosEncoding::Embedding => {
            if n > MAX_POSITION_EMBEDDINGS {
                return Err(Error::Data(format!(
                    "sentence length {n} exceeds position-embedding capacity {MAX_POSITION_EMBEDDINGS}"
                )));
            }
            let positions: Vec<usize> = (0..n).collect();
            let pos = g.gather(bound.var("pos_emb")?, &positions)?;
            g.add(x, pos)
        }
        PosEncoding::None => Ok(x),
    }
}

fn apply_sublayer<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    layer: usize,
    cfg: &ModelConfig,
    bound: &BoundParams,
    train: bool,
    rng: &mut StdRng,
) -> Result<Var> {
    match cfg.sublayer {
        SublayerKind::Ffn => ffn_sublayer(
            g,
            x,
            bound.var(&format!("layer{layer}.ffn.w1"))?,
            bound.var(&format!("layer{layer}.ffn.b1"))?,
            bound.var(&format!("layer{layer}.ffn.w2"))?,
            bound.var(&format!("layer{layer}.ffn.b2"))?,
            T::from_f64(cfg.relu_keep),
            train,
            rng,
        ),
        SublayerKind::CnnGlu => glu_conv_sublayer(
            g,
            x,
            bound.var(&format!("layer{layer}.conv.w"))?,
            bound.var(&format!("layer{layer}.conv.wb"))?,
            bound.var(&format!("layer{layer}.conv.v"))?,
            bound.var(&format!("layer{layer}.conv.vb"))?,
            cfg.conv_width,
        ),
        SublayerKind::RnnBilstm => {
            let fwd = LstmDirection {
                wx: bound.var(&format!("layer{layer}.lstm.fwd.wx"))?,
                wh: bound.var(&format!("layer{layer}.lstm.fwd.wh"))?,
                b: bound.var(&format!("layer{layer}.lstm.fwd.b"))?,
            };
            let bwd = LstmDirection {
                wx: bound.var(&format!("layer{layer}.lstm.bwd.wx"))?,
                wh: bound.var(&format!("layer{layer}.lstm.bwd.wh"))?,
                b: bound.var(&format!("layer{layer}.lstm.bwd.b"))?,
            };
            bilstm_sublayer(g, x, &fwd, &bwd)
        }
        SublayerKind::None => Ok(x),
    }
}

/// Run the N-layer stack over position-encoded embeddings. Returns the
/// topmost attention sub-layer output, shape `[n, d]`.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &ModelConfig,
    bound: &BoundParams,
    key_valid: Option<&[bool]>,
    train: bool,
    rng: &mut StdRng,
) -> Result<Var> {
    let eps = T::from_f64(LAYER_NORM_EPS);
    let res_keep = T::from_f64(cfg.residual_keep);
    let mut x = x;
    for l in 0..cfg.depth {
        if cfg.sublayer != SublayerKind::None {
            let sub = apply_sublayer(g, x, l, cfg, bound, train, rng)?;
            let sub = g.dropout(sub, res_keep, train, rng)?;
            let sum = g.add(x, sub)?;
            x = g.layer_norm(
                sum,
                bound.var(&format!("layer{l}.ln1.gain"))?,
                bound.var(&format!("layer{l}.ln1.bias"))?,
                eps,
            )?;
        }
        let weights = MultiHeadWeights {
            wq: (0..cfg.heads)
                .map(|h| bound.var(&format!("layer{l}.attn.h{h}.wq")))
                .collect::<Result<_>>()?,
            wk: (0..cfg.heads)
                .map(|h| bound.var(&format!("layer{l}.attn.h{h}.wk")))
                .collect::<Result<_>>()?,
            wv: (0..cfg.heads)
                .map(|h| bound.var(&format!("layer{l}.attn.h{h}.wv")))
                .collect::<Result<_>>()?,
            w_out: bound.var(&format!("layer{l}.attn.w_out"))?,
        };
        let attn = multi_head_attention(
            g,
            x,
            &weights,
            key_valid,
            cfg.scale_mode,
            T::from_f64(cfg.attention_keep),
            train,
            rng,
        )?;
        let attn = g.dropout(attn, res_keep, train, rng)?;
        let sum = g.add(x, attn)?;
        x = g.layer_norm(
            sum,
            bound.var(&format!("layer{l}.ln2.gain"))?,
            bound.var(&format!("layer{l}.ln2.bias"))?,
            eps,
        )?;
    }
    Ok(x)
}

/// Embeddings + position signal + encoder + output projection.
/// Returns per-token logits `[n, num_tags]`.
#[allow(clippy::too_many_arguments)]
pub fn forward_tokens<T: Real>(
    g: &mut Graph<T>,
    word_ids: &[usize],
    mask_bits: &[usize],
    key_valid: Option<&[bool]>,
    cfg: &ModelConfig,
    bound: &BoundParams,
    train: bool,
    rng: &mut StdRng,
) -> Result<Var> {
    let x = embed_inputs(g, word_ids, mask_bits, bound)?;
    let x = add_position_signal(g, x, cfg, bound)?;
    let h = encode(g, x, cfg, bound, key_valid, train, rng)?;
    g.matmul(h, bound.var("w_o")?)
}
