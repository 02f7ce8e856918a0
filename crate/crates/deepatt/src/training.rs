//! Optimization: learning-rate schedule, gradient clipping, Adadelta, the
//! training loop, and evaluation helpers shared with the CLI.

use crate::data::{LabeledSentence, Vocabulary};
use crate::decode::{argmax_decode, constrained_decode, tags_to_spans, TagSet};
use crate::encoder::{forward_tokens, ModelConfig, ModelParameters};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{span_prf, PrfScores, SpanSets};
use crate::real::Real;
use crate::tensor::Tensor;
use rand::rngs::StdRng;
use rand::SeedableRng;

/// Learning-rate and batching schedule. Defaults are the full-scale
/// profile; desk-scale runs override `total_steps` and `token_budget`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub base_lr: f64,
    /// Steps at the base rate before halving begins.
    pub plateau_steps: usize,
    /// Halve again every this many steps after the plateau.
    pub halving_interval: usize,
    pub total_steps: usize,
    pub clip_norm: f64,
    /// Padding-inclusive token budget per batch.
    pub token_budget: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            base_lr: 1.0,
            plateau_steps: 400_000,
            halving_interval: 100_000,
            total_steps: 600_000,
            clip_norm: 1.0,
            token_budget: 4096,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("base_lr and clip_norm must be positive".into()));
        }
        if self.plateau_steps == 0 || self.halving_interval == 0 || self.token_budget == 0 {
            return Err(Error::Config(
                "plateau_steps, halving_interval and token_budget must be positive".into(),
            ));
        }
        // total_steps == 0 is the explicit no-op profile
        if self.total_steps > 0 && self.plateau_steps > self.total_steps {
            return Err(Error::Config("plateau_steps must be <= total_steps".into()));
        }
        Ok(())
    }
}

/// Base rate until the plateau, then halved immediately and again every
/// `halving_interval` steps.
pub fn lr_at(step: usize, sched: &TrainSchedule) -> f64 {
    if step < sched.plateau_steps {
        sched.base_lr
    } else {
        let halvings = 1 + (step - sched.plateau_steps) / sched.halving_interval;
        sched.base_lr * 0.5f64.powi(halvings as i32)
    }
}

/// Scale all gradients by `threshold / norm` when the global L2 norm
/// exceeds the threshold. Returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(grads: Vec<&mut Tensor<T>>, threshold: T) -> Result<T> {
    if threshold <= T::zero() {
        return Err(Error::Config("clip threshold must be positive".into()));
    }
    let mut sq = T::zero();
    for g in &grads {
        for &v in g.data() {
            sq = sq + v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > threshold {
        let s = threshold / norm;
        for g in grads {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    Ok(norm)
}

/// Adadelta accumulators, one pair per parameter in store order.
#[derive(Debug, Clone)]
pub struct AdadeltaState<T> {
    pub rho: T,
    pub eps: T,
    avg_sq_grad: Vec<Tensor<T>>,
    avg_sq_update: Vec<Tensor<T>>,
}

pub const ADADELTA_RHO: f64 = 0.95;
pub const ADADELTA_EPS: f64 = 1e-6;

impl<T: Real> AdadeltaState<T> {
    pub fn new(params: &ModelParameters<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        AdadeltaState {
            rho: T::from_f64(ADADELTA_RHO),
            eps: T::from_f64(ADADELTA_EPS),
            avg_sq_grad: zeros.clone(),
            avg_sq_update: zeros,
        }
    }

    /// One optimizer step over every parameter, consuming the gradients
    /// currently accumulated in the store.
    pub fn step(&mut self, params: &mut ModelParameters<T>, lr: T) {
        for (i, p) in params.iter_mut().enumerate() {
            adadelta_step(
                p.value.data_mut(),
                p.grad.data(),
                self.avg_sq_grad[i].data_mut(),
                self.avg_sq_update[i].data_mut(),
                self.rho,
                self.eps,
                lr,
            );
        }
    }
}

/// E[g²] ← ρE[g²]+(1−ρ)g²; Δ = −(√(E[Δx²]+ε)/√(E[g²]+ε))·g;
/// E[Δx²] ← ρE[Δx²]+(1−ρ)Δ²; x ← x + lr·Δ.
pub fn adadelta_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    avg_sq_grad: &mut [T],
    avg_sq_update: &mut [T],
    rho: T,
    eps: T,
    lr: T,
) {
    let one_minus = T::one() - rho;
    for i in 0..param.len() {
        let g = grad[i];
        avg_sq_grad[i] = rho * avg_sq_grad[i] + one_minus * g * g;
        let delta = -((avg_sq_update[i] + eps).sqrt() / (avg_sq_grad[i] + eps).sqrt()) * g;
        avg_sq_update[i] = rho * avg_sq_update[i] + one_minus * delta * delta;
        param[i] = param[i] + lr * delta;
    }
}

/// A sentence mapped onto vocabulary and tag ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSentence {
    pub word_ids: Vec<usize>,
    pub mask_bits: Vec<usize>,
    pub gold: Option<Vec<usize>>,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }
}

pub fn encode_corpus(
    corpus: &[LabeledSentence],
    vocab: &Vocabulary,
    tagset: &TagSet,
) -> Result<Vec<EncodedSentence>> {
    corpus
        .iter()
        .map(|s| {
            let gold = match &s.tags {
                Some(tags) => Some(tags.iter().map(|t| tagset.id(t)).collect::<Result<_>>()?),
                None => None,
            };
            Ok(EncodedSentence {
                word_ids: s.words.iter().map(|w| vocab.id(w)).collect(),
                mask_bits: s.mask.iter().map(|&m| m as usize).collect(),
                gold,
            })
        })
        .collect()
}

/// Overwrite word-embedding rows from a pretrained text table.
pub fn load_pretrained<T: Real>(
    text: &str,
    vocab: &Vocabulary,
    dim: usize,
    params: &mut ModelParameters<T>,
) -> Result<usize> {
    let emb = params
        .iter_mut()
        .find(|p| p.name == "word_emb")
        .ok_or_else(|| Error::Data("model has no word_emb parameter".into()))?;
    crate::data::load_pretrained_embeddings(text, vocab, dim, &mut emb.value)
}

/// Decode one sentence with the current parameters (no dropout).
pub fn predict_tags<T: Real>(
    sent: &EncodedSentence,
    cfg: &ModelConfig,
    params: &ModelParameters<T>,
    tagset: &TagSet,
    constrained: bool,
) -> Result<Vec<usize>> {
    let probs = predict_probs(sent, cfg, params)?;
    decode_probs(&probs, tagset, constrained)
}

/// Per-token softmax distribution over tags, rows summing to one.
/// Returned in f64 so ensemble averaging and decoding are width-agnostic.
pub fn predict_probs<T: Real>(
    sent: &EncodedSentence,
    cfg: &ModelConfig,
    params: &ModelParameters<T>,
) -> Result<Tensor<f64>> {
    let mut g = Graph::<T>::new();
    let bound = params.bind(&mut g, false);
    let mut rng = StdRng::seed_from_u64(0);
    let logits = forward_tokens(
        &mut g,
        &sent.word_ids,
        &sent.mask_bits,
        None,
        cfg,
        &bound,
        false,
        &mut rng,
    )?;
    let probs = g.softmax_lastdim(logits)?;
    Ok(g.value(probs).map(|v| v.to_f64()))
}

pub fn decode_probs(probs: &Tensor<f64>, tagset: &TagSet, constrained: bool) -> Result<Vec<usize>> {
    if constrained {
        let logp = probs.map(|p| p.max(f64::MIN_POSITIVE).ln());
        constrained_decode(&logp, tagset)
    } else {
        argmax_decode(probs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub token_accuracy: f64,
    pub scores: PrfScores,
}

/// Token accuracy plus span P/R/F1/Comp against the gold tags.
pub fn evaluate<T: Real>(
    data: &[EncodedSentence],
    cfg: &ModelConfig,
    params: &ModelParameters<T>,
    tagset: &TagSet,
    constrained: bool,
    score_verb: bool,
) -> Result<EvalResult> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut pred_spans = Vec::with_capacity(data.len());
    let mut gold_spans = Vec::with_capacity(data.len());
    for sent in data {
        let gold = sent
            .gold
            .as_ref()
            .ok_or_else(|| Error::Data("evaluation corpus has no tag column".into()))?;
        let pred = predict_tags(sent, cfg, params, tagset, constrained)?;
        correct += pred.iter().zip(gold).filter(|(p, g)| p == g).count();
        total += gold.len();
        pred_spans.push(tags_to_spans(&pred, tagset));
        gold_spans.push(tags_to_spans(gold, tagset));
    }
    let instances: Vec<SpanSets> = pred_spans
        .iter()
        .zip(&gold_spans)
        .map(|(p, g)| (p.as_slice(), g.as_slice()))
        .collect();
    Ok(EvalResult {
        token_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        scores: span_prf(&instances, score_verb),
    })
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Evaluate on dev every this many steps; 0 disables periodic eval.
    pub eval_every: usize,
    /// Stop early once dev F1 reaches this value.
    pub early_stop_f1: Option<f64>,
    pub constrained: bool,
    pub score_verb: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            eval_every: 0,
            early_stop_f1: None,
            constrained: false,
            score_verb: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub steps_run: usize,
    pub final_loss: f64,
    /// `step=<i> loss=<f> lr=<f> [dev_f1=<f>]` per optimizer step.
    pub log: Vec<String>,
    pub best_dev_f1: Option<f64>,
    /// Snapshot of the parameters at the best dev F1, when dev was given.
    pub best_params: Option<ModelParameters<T>>,
}

/// Batched training with per-sentence forwards sharing one graph per
/// batch. Deterministic for a fixed seed. Aborts with a numeric error
/// naming the step and batch when the loss goes non-finite.
pub fn train_loop<T: Real>(
    train: &[EncodedSentence],
    dev: Option<&[EncodedSentence]>,
    cfg: &ModelConfig,
    sched: &TrainSchedule,
    params: &mut ModelParameters<T>,
    tagset: &TagSet,
    seed: u64,
    opts: &TrainOptions,
) -> Result<TrainOutcome<T>> {
    sched.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    for (i, s) in train.iter().enumerate() {
        if s.gold.is_none() {
            return Err(Error::Data(format!("training sentence {i} has no tags")));
        }
    }
    let lengths: Vec<usize> = train.iter().map(|s| s.len()).collect();
    let eps = T::from_f64(cfg.label_smoothing);
    let mut opt = AdadeltaState::new(params);
    let mut dropout_rng = StdRng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut epoch = 0u64;
    let mut final_loss = 0.0;
    let mut best_dev_f1: Option<f64> = None;
    let mut best_params: Option<ModelParameters<T>> = None;

    'outer: while step < sched.total_steps {
        let batches = crate::data::batch_by_tokens(&lengths, sched.token_budget, seed.wrapping_add(epoch))?;
        for (batch_id, batch) in batches.iter().enumerate() {
            if step >= sched.total_steps {
                break 'outer;
            }
            let mut g = Graph::<T>::new();
            let bound = params.bind(&mut g, true);
            let mut loss_var = None;
            let mut token_count = 0usize;
            for &si in batch {
                let sent = &train[si];
                let logits = forward_tokens(
                    &mut g,
                    &sent.word_ids,
                    &sent.mask_bits,
                    None,
                    cfg,
                    &bound,
                    true,
                    &mut dropout_rng,
                )?;
                let valid = vec![true; sent.len()];
                let l = g.smoothed_ce_sum(logits, sent.gold.as_ref().unwrap(), &valid, eps)?;
                token_count += sent.len();
                loss_var = Some(match loss_var {
                    None => l,
                    Some(acc) => g.add(acc, l)?,
                });
            }
            let loss_var = g.scale(loss_var.unwrap(), T::one() / T::from_f64(token_count as f64));
            let loss = g.value(loss_var).item().to_f64();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at step {step}, batch {batch_id}"
                )));
            }
            g.backward(loss_var)?;
            params.accumulate_grads(&g, &bound);
            let grads: Vec<&mut Tensor<T>> = params.iter_mut().map(|p| &mut p.grad).collect();
            clip_global_norm(grads, T::from_f64(sched.clip_norm))?;
            let lr = lr_at(step, sched);
            opt.step(params, T::from_f64(lr));
            params.zero_grads();
            final_loss = loss;
            step += 1;

            let mut line = format!("step={step} loss={loss:.6} lr={lr}");
            let eval_now = dev.is_some()
                && ((opts.eval_every > 0 && step % opts.eval_every == 0)
                    || step == sched.total_steps);
            if eval_now {
                let res = evaluate(
                    dev.unwrap(),
                    cfg,
                    params,
                    tagset,
                    opts.constrained,
                    opts.score_verb,
                )?;
                let f1 = res.scores.f1;
                line.push_str(&format!(" dev_f1={f1:.4}"));
                if best_dev_f1.map_or(true, |b| f1 > b) {
                    best_dev_f1 = Some(f1);
                    best_params = Some(params.clone());
                }
                log.push(line);
                if opts.early_stop_f1.is_some_and(|t| f1 >= t) {
                    break 'outer;
                }
                continue;
            }
            log.push(line);
        }
        epoch += 1;
    }

    Ok(TrainOutcome {
        steps_run: step,
        final_loss,
        log,
        best_dev_f1,
        best_params,
    })
}
