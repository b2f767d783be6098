//! Supervised pretraining of the toy model on a token-association task.
//!
//! The task maps every vocabulary token to a partner token through a seeded
//! permutation; the model is trained to predict the partner of the current
//! token at every position of uniformly random sequences. Because inputs are
//! IID uniform, any random prompt is in-distribution, so the trained model
//! answers fact prompts and retention probes with real confidence margins
//! instead of the near-ties of a freshly initialized network.

use crate::error::{Error, Result};
use crate::grad::{sequence_grads, ParamGrads};
use crate::model::{forward, ModelParams, TokenId};
use crate::scalar::{c, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Token-to-token association map; a permutation so generation under the
/// learned rule cycles through the vocabulary instead of absorbing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssociationTask {
    map: Vec<TokenId>,
}

impl AssociationTask {
    pub fn permutation(vocab_size: usize, seed: u64) -> Self {
        let mut map: Vec<TokenId> = (0..vocab_size as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..vocab_size).rev() {
            let j = rng.random_range(0..=i);
            map.swap(i, j);
        }
        AssociationTask { map }
    }

    pub fn target(&self, token: TokenId) -> TokenId {
        self.map[token as usize]
    }

    pub fn targets(&self, tokens: &[TokenId]) -> Vec<TokenId> {
        tokens.iter().map(|&t| self.target(t)).collect()
    }
}

/// Which parameters the optimizer may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Every parameter trains.
    Full,
    /// Freezes every parameter the edit-layer keys depend on: embeddings,
    /// the layers below the edit site, and the edit layer up through its
    /// first MLP matrix. Only the downstream readout trains. A network this
    /// small otherwise learns context-invariant keys, which removes the
    /// context sensitivity that prefix averaging exists to capture.
    KeysFrozen,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; zero disables clipping.
    pub clip_norm: f64,
    /// Training stops early once batch loss falls below this.
    pub target_loss: f64,
    pub scope: TrainScope,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 2000,
            batch_size: 16,
            seq_len: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            target_loss: 0.05,
            scope: TrainScope::Full,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport<T> {
    pub steps_run: usize,
    pub final_loss: T,
    pub accuracy: T,
    pub mean_margin: T,
    /// Batch loss sampled every 50 steps.
    pub loss_curve: Vec<T>,
}

fn params_to_flat<T: Scalar>(p: &ModelParams<T>) -> Vec<T> {
    let mut out = Vec::new();
    out.extend(p.token_emb.iter().copied());
    out.extend(p.pos_emb.iter().copied());
    for lw in &p.layers {
        out.extend(lw.ln1_gain.iter().copied());
        out.extend(lw.ln1_bias.iter().copied());
        out.extend(lw.attn.w_q.iter().copied());
        out.extend(lw.attn.w_k.iter().copied());
        out.extend(lw.attn.w_v.iter().copied());
        out.extend(lw.attn.w_o.iter().copied());
        out.extend(lw.ln2_gain.iter().copied());
        out.extend(lw.ln2_bias.iter().copied());
        out.extend(lw.w_fc.iter().copied());
        out.extend(lw.b_fc.iter().copied());
        out.extend(lw.w_proj.iter().copied());
    }
    out.extend(p.lnf_gain.iter().copied());
    out.extend(p.lnf_bias.iter().copied());
    out.extend(p.unembed.iter().copied());
    out
}

fn params_from_flat<T: Scalar>(p: &mut ModelParams<T>, flat: &[T]) {
    let mut idx = 0usize;
    let take1 = |arr: &mut ndarray::Array1<T>, idx: &mut usize| {
        for x in arr.iter_mut() {
            *x = flat[*idx];
            *idx += 1;
        }
    };
    let take2 = |arr: &mut ndarray::Array2<T>, idx: &mut usize| {
        for x in arr.iter_mut() {
            *x = flat[*idx];
            *idx += 1;
        }
    };
    take2(&mut p.token_emb, &mut idx);
    take2(&mut p.pos_emb, &mut idx);
    for lw in &mut p.layers {
        take1(&mut lw.ln1_gain, &mut idx);
        take1(&mut lw.ln1_bias, &mut idx);
        take2(&mut lw.attn.w_q, &mut idx);
        take2(&mut lw.attn.w_k, &mut idx);
        take2(&mut lw.attn.w_v, &mut idx);
        take2(&mut lw.attn.w_o, &mut idx);
        take1(&mut lw.ln2_gain, &mut idx);
        take1(&mut lw.ln2_bias, &mut idx);
        take2(&mut lw.w_fc, &mut idx);
        take1(&mut lw.b_fc, &mut idx);
        take2(&mut lw.w_proj, &mut idx);
    }
    take1(&mut p.lnf_gain, &mut idx);
    take1(&mut p.lnf_bias, &mut idx);
    take2(&mut p.unembed, &mut idx);
    debug_assert_eq!(idx, flat.len());
}

/// Trainability flag per flat-vector slot, in `params_to_flat` order.
fn scope_mask(cfg: &crate::model::ModelConfig, scope: TrainScope) -> Vec<bool> {
    let (v, d, m) = (cfg.vocab_size, cfg.d_model, cfg.d_mlp);
    let mut mask = Vec::new();
    let mut push = |n: usize, trainable: bool| mask.extend(std::iter::repeat(trainable).take(n));
    let full = scope == TrainScope::Full;
    push(v * d, full); // token_emb
    push(cfg.max_seq * d, full); // pos_emb
    for l in 0..cfg.n_layers {
        let above = full || l > cfg.edit_layer;
        push(2 * d, above); // ln1
        push(4 * d * d, above); // attention
        push(2 * d, above); // ln2
        push(m * d + m, above); // w_fc, b_fc
        // w_proj sits downstream of the keys, so it trains at the edit layer.
        push(d * m, above || l == cfg.edit_layer);
    }
    push(2 * d, true); // final norm
    push(v * d, true); // unembed
    mask
}

struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn new(len: usize) -> Self {
        Adam { m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0 }
    }

    fn step(&mut self, x: &mut [T], g: &[T], s: &TrainSettings) {
        self.t += 1;
        let b1 = c::<T>(s.beta1);
        let b2 = c::<T>(s.beta2);
        let lr = c::<T>(s.learning_rate);
        let eps = c::<T>(s.adam_eps);
        let bc1 = T::one() - b1.powi(self.t);
        let bc2 = T::one() - b2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g[i] * g[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            x[i] = x[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Adam training loop over random batches; mutates `params` in place and
/// stops at `steps` or once batch loss reaches `target_loss`.
pub fn train_model<T: Scalar>(
    params: &mut ModelParams<T>,
    task: &AssociationTask,
    settings: &TrainSettings,
) -> Result<TrainReport<T>> {
    let cfg = params.config;
    if settings.seq_len < 1 || settings.seq_len > cfg.max_seq {
        return Err(Error::config("train seq_len outside model range"));
    }
    if settings.batch_size < 1 || settings.steps < 1 {
        return Err(Error::config("train batch_size and steps must be positive"));
    }
    if task.map.len() != cfg.vocab_size {
        return Err(Error::config("association map size differs from vocabulary"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut flat = params_to_flat(params);
    let mask = scope_mask(&cfg, settings.scope);
    debug_assert_eq!(mask.len(), flat.len());
    let mut adam = Adam::new(flat.len());
    let weight = c::<T>(1.0 / settings.batch_size as f64);
    let first_grad_layer = match settings.scope {
        TrainScope::Full => 0,
        TrainScope::KeysFrozen => cfg.edit_layer,
    };
    let mut last_loss = T::infinity();
    let mut steps_run = 0usize;
    let mut loss_curve = Vec::new();
    for step in 0..settings.steps {
        let mut grads = ParamGrads::zeros(&cfg);
        let mut batch_loss = T::zero();
        for _ in 0..settings.batch_size {
            let tokens: Vec<TokenId> = (0..settings.seq_len)
                .map(|_| rng.random_range(0..cfg.vocab_size as u32))
                .collect();
            let targets = task.targets(&tokens);
            let (loss, _) =
                sequence_grads(params, &tokens, &targets, &mut grads, weight, first_grad_layer)?;
            batch_loss += loss * weight;
        }
        if step % 50 == 0 {
            loss_curve.push(batch_loss);
        }
        let mut g = grads.to_flat();
        if settings.scope != TrainScope::Full {
            for (x, &keep) in g.iter_mut().zip(&mask) {
                if !keep {
                    *x = T::zero();
                }
            }
        }
        if settings.clip_norm > 0.0 {
            let norm = g.iter().map(|&x| x * x).sum::<T>().sqrt();
            let ceiling = c::<T>(settings.clip_norm);
            if norm > ceiling {
                let scale = ceiling / norm;
                for x in &mut g {
                    *x = *x * scale;
                }
            }
        }
        adam.step(&mut flat, &g, settings);
        params_from_flat(params, &flat);
        steps_run += 1;
        last_loss = batch_loss;
        if batch_loss < c::<T>(settings.target_loss) {
            break;
        }
    }
    let (accuracy, mean_margin) = evaluate(params, task, 200, settings.seed ^ 0x9e37_79b9)?;
    Ok(TrainReport { steps_run, final_loss: last_loss, accuracy, mean_margin, loss_curve })
}

/// Accuracy of the learned association on `n` random prompts, along with the
/// mean logit margin between the top answer and the runner-up.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    task: &AssociationTask,
    n: usize,
    seed: u64,
) -> Result<(T, T)> {
    let cfg = &params.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    let mut margin_sum = T::zero();
    for _ in 0..n {
        let len = rng.random_range(2..=cfg.max_seq.min(8));
        let tokens: Vec<TokenId> =
            (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
        let trace = forward(params, &tokens)?;
        let logits = trace.logits.row(len - 1);
        let mut best = (0usize, T::neg_infinity());
        let mut second = T::neg_infinity();
        for (j, &x) in logits.iter().enumerate() {
            if x > best.1 {
                second = best.1;
                best = (j, x);
            } else if x > second {
                second = x;
            }
        }
        if best.0 == task.target(tokens[len - 1]) as usize {
            correct += 1;
        }
        margin_sum += best.1 - second;
    }
    let nt = c::<T>(n as f64);
    Ok((c::<T>(correct as f64) / nt, margin_sum / nt))
}
