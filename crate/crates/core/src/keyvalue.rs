//! Key construction and value solving for a single fact.
//!
//! A fact is keyed by the MLP activation at the last subject token of its
//! prompt. The averaged key prepends random prefixes and averages the
//! activation across them; the original key reads the bare prompt. The value
//! is found by gradient ascent on the target log probability under injection
//! at the edit site, with a proximity penalty keeping it near the unedited
//! MLP output.

use crate::error::{Error, Result};
use crate::grad::{upper_backward, upper_forward};
use crate::linalg::{l2_norm, log_softmax, softmax};
use crate::model::{embed, forward, layer_forward, ModelConfig, ModelParams, TokenId};
use crate::scalar::{c, Scalar};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Neighborhood probe: an unrelated prompt whose answer should survive edits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborProbe {
    pub prompt: Vec<TokenId>,
    pub expected: TokenId,
}

/// A synthetic editable fact over raw token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub id: u32,
    pub prompt: Vec<TokenId>,
    /// Position at which the key and value are read.
    pub subject_last_index: usize,
    pub target_new: TokenId,
    pub target_old: TokenId,
    pub paraphrases: Vec<Vec<TokenId>>,
    pub neighborhood: Vec<NeighborProbe>,
    pub adversarial: bool,
}

impl Fact {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.prompt.is_empty() || self.prompt.len() > config.max_seq {
            return Err(Error::input(format!(
                "fact {}: prompt length {} out of range",
                self.id,
                self.prompt.len()
            )));
        }
        if self.subject_last_index >= self.prompt.len() {
            return Err(Error::input(format!(
                "fact {}: subject_last_index {} outside prompt",
                self.id, self.subject_last_index
            )));
        }
        if self.target_new == self.target_old {
            return Err(Error::input(format!(
                "fact {}: target_new equals target_old",
                self.id
            )));
        }
        let v = config.vocab_size as u32;
        if self.target_new >= v || self.target_old >= v {
            return Err(Error::input(format!("fact {}: target out of vocabulary", self.id)));
        }
        for seq in std::iter::once(&self.prompt)
            .chain(self.paraphrases.iter())
            .chain(self.neighborhood.iter().map(|nb| &nb.prompt))
        {
            if seq.is_empty() || seq.len() > config.max_seq {
                return Err(Error::input(format!("fact {}: sequence length out of range", self.id)));
            }
            if seq.iter().any(|&t| t >= v) {
                return Err(Error::input(format!("fact {}: token out of vocabulary", self.id)));
            }
        }
        for nb in &self.neighborhood {
            if nb.expected >= v {
                return Err(Error::input(format!("fact {}: probe answer out of vocabulary", self.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyKind {
    Averaged,
    Original,
}

/// Key activation with its provenance.
#[derive(Debug, Clone)]
pub struct KeyVector<T> {
    pub values: Array1<T>,
    pub kind: KeyKind,
    pub prefix_count: usize,
}

/// Solved value vector with solver statistics.
#[derive(Debug, Clone)]
pub struct ValueVector<T> {
    pub values: Array1<T>,
    pub solver_steps: usize,
    pub initial_target_logprob: T,
    pub final_target_logprob: T,
    pub final_target_prob: T,
}

/// Random prefixes of uniform tokens, lengths drawn from `len_range`
/// inclusive. Deterministic per seed.
pub fn make_prefixes(
    n: usize,
    len_range: (usize, usize),
    vocab_size: usize,
    seed: u64,
) -> Vec<Vec<TokenId>> {
    let (lo, hi) = len_range;
    assert!(hi >= lo, "invalid prefix length range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(lo..=hi);
            (0..len).map(|_| rng.random_range(0..vocab_size as u32)).collect()
        })
        .collect()
}

fn key_at<T: Scalar>(params: &ModelParams<T>, tokens: &[TokenId], position: usize) -> Result<Array1<T>> {
    let trace = forward(params, tokens)?;
    Ok(trace.key_at(params.config.edit_layer, position))
}

/// Bare-prompt key: the activation for the prompt alone.
pub fn key_original<T: Scalar>(params: &ModelParams<T>, fact: &Fact) -> Result<KeyVector<T>> {
    fact.validate(&params.config)?;
    let values = key_at(params, &fact.prompt, fact.subject_last_index)?;
    if !values.iter().all(|x| x.is_finite()) {
        return Err(Error::numerical("non-finite key activation"));
    }
    Ok(KeyVector { values, kind: KeyKind::Original, prefix_count: 1 })
}

/// Prefix-averaged key: mean activation over each prefix prepended to the
/// prompt, read at the shifted subject position.
pub fn key_averaged<T: Scalar>(
    params: &ModelParams<T>,
    fact: &Fact,
    prefixes: &[Vec<TokenId>],
) -> Result<KeyVector<T>> {
    fact.validate(&params.config)?;
    if prefixes.is_empty() {
        return Err(Error::input("key_averaged needs at least one prefix"));
    }
    let mut acc = Array1::<T>::zeros(params.config.d_mlp);
    for prefix in prefixes {
        let tokens: Vec<TokenId> = prefix.iter().chain(fact.prompt.iter()).copied().collect();
        if tokens.len() > params.config.max_seq {
            return Err(Error::input(format!(
                "prefix of length {} overflows max_seq for fact {}",
                prefix.len(),
                fact.id
            )));
        }
        let k = key_at(params, &tokens, prefix.len() + fact.subject_last_index)?;
        acc = acc + &k;
    }
    let n = c::<T>(prefixes.len() as f64);
    let values = acc.mapv(|x| x / n);
    if !values.iter().all(|x| x.is_finite()) {
        return Err(Error::numerical("non-finite key activation"));
    }
    Ok(KeyVector { values, kind: KeyKind::Averaged, prefix_count: prefixes.len() })
}

#[derive(Debug, Clone, Copy)]
pub struct SolverSettings<T> {
    pub max_steps: usize,
    /// Proximity penalty weight on `|v - v_init|^2`.
    pub proximity_delta: T,
    pub initial_step: T,
    pub max_halvings: usize,
    /// Stop once the mean target probability across contexts reaches this
    /// and every context decodes to the target under injection.
    pub early_stop_prob: T,
}

impl<T: Scalar> Default for SolverSettings<T> {
    fn default() -> Self {
        SolverSettings {
            max_steps: 100,
            proximity_delta: c::<T>(1e-3),
            initial_step: c::<T>(1.0),
            max_halvings: 10,
            early_stop_prob: c::<T>(0.5),
        }
    }
}

/// Lower-half forward state for one optimization context, cached so each
/// solver iteration only recomputes layers above the edit site.
struct ContextCache<T> {
    /// Residual stream after the edit layer with no injection.
    base: Array2<T>,
    /// Attention-side residual at the injection position.
    h_mid_row: Array1<T>,
    inject_pos: usize,
    read_pos: usize,
}

fn build_context<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[TokenId],
    inject_pos: usize,
) -> ContextCache<T> {
    let edit = params.config.edit_layer;
    let mut x = embed(params, tokens);
    let mut cache = None;
    for l in 0..=edit {
        let (lt, x_next) = layer_forward(params, l, &x, None);
        if l == edit {
            cache = Some((lt.h_mid, x_next.clone()));
        }
        x = x_next;
    }
    let (h_mid, base) = cache.expect("edit layer visited");
    ContextCache {
        base,
        h_mid_row: h_mid.row(inject_pos).to_owned(),
        inject_pos,
        read_pos: tokens.len() - 1,
    }
}

struct Objective<T> {
    /// Penalized objective being maximized.
    value: T,
    mean_logprob: T,
    mean_prob: T,
    /// Whether every context decodes to the target under injection.
    all_top: bool,
}

fn eval_contexts<T: Scalar>(
    params: &ModelParams<T>,
    contexts: &[ContextCache<T>],
    v: &Array1<T>,
    v_init: &Array1<T>,
    delta: T,
    target: TokenId,
    with_grad: bool,
) -> (Objective<T>, Option<Array1<T>>) {
    let edit = params.config.edit_layer;
    let n = c::<T>(contexts.len() as f64);
    let mut lp_sum = T::zero();
    let mut prob_sum = T::zero();
    let mut all_top = true;
    let mut grad = with_grad.then(|| Array1::<T>::zeros(v.len()));
    for ctx in contexts {
        let mut x = ctx.base.clone();
        for j in 0..v.len() {
            x[(ctx.inject_pos, j)] = ctx.h_mid_row[j] + v[j];
        }
        let ut = upper_forward(params, x, edit + 1, ctx.read_pos);
        let logits: Vec<T> = ut.logits_row.iter().copied().collect();
        let lps = log_softmax(&logits);
        lp_sum += lps[target as usize];
        prob_sum += lps[target as usize].exp();
        let mut top = 0usize;
        for (j, &x) in logits.iter().enumerate() {
            if x > logits[top] {
                top = j;
            }
        }
        all_top &= top == target as usize;
        if let Some(g) = grad.as_mut() {
            let probs = softmax(&logits);
            let mut dlogits = Array1::from_iter(probs.iter().map(|&p| -p));
            dlogits[target as usize] += T::one();
            let dh = upper_backward(params, &ut, &dlogits);
            for j in 0..v.len() {
                g[j] += dh[(ctx.inject_pos, j)];
            }
        }
    }
    let mean_logprob = lp_sum / n;
    let mean_prob = prob_sum / n;
    let diff = v - v_init;
    let penalty = delta * diff.iter().map(|&x| x * x).sum::<T>();
    let value = mean_logprob - penalty;
    let grad = grad.map(|g| {
        let two = c::<T>(2.0);
        Array1::from_iter(
            (0..v.len()).map(|j| g[j] / n - two * delta * (v[j] - v_init[j])),
        )
    });
    (Objective { value, mean_logprob, mean_prob, all_top }, grad)
}

/// Gradient-ascent solve for the value vector. The optimization contexts
/// match the key kind: original keys use the bare prompt alone, averaged
/// keys optimize the mean objective over the bare prompt plus the same
/// prefixed prompts, since the edit is asked to hold in all of them. The
/// ascent stops once the mean target probability clears `early_stop_prob`
/// and every context decodes to the target under injection, with the
/// crossing step bisected so the returned value sits just above that
/// boundary.
pub fn solve_value<T: Scalar>(
    params: &ModelParams<T>,
    fact: &Fact,
    key_kind: KeyKind,
    prefixes: &[Vec<TokenId>],
    settings: &SolverSettings<T>,
) -> Result<ValueVector<T>> {
    fact.validate(&params.config)?;
    let contexts: Vec<Vec<TokenId>> = match key_kind {
        KeyKind::Original => vec![fact.prompt.clone()],
        KeyKind::Averaged => {
            if prefixes.is_empty() {
                return Err(Error::input("averaged solve needs at least one prefix"));
            }
            std::iter::once(fact.prompt.clone())
                .chain(
                    prefixes
                        .iter()
                        .map(|pre| pre.iter().chain(fact.prompt.iter()).copied().collect()),
                )
                .collect()
        }
    };
    for seq in &contexts {
        if seq.len() > params.config.max_seq {
            return Err(Error::input(format!(
                "prefixed prompt overflows max_seq for fact {}",
                fact.id
            )));
        }
    }
    let shift = |full: &Vec<TokenId>| full.len() - fact.prompt.len() + fact.subject_last_index;
    let caches: Vec<ContextCache<T>> = contexts
        .iter()
        .map(|seq| build_context(params, seq, shift(seq)))
        .collect();

    // The proximity penalty anchors at the unedited MLP output of the bare
    // prompt; the ascent itself starts from the value the delta overwrites,
    // so the solved displacement is measured against the written key.
    let bare = forward(params, &fact.prompt)?;
    let v_init = bare.layers[params.config.edit_layer]
        .mlp_out
        .row(fact.subject_last_index)
        .to_owned();
    let v_start = match key_kind {
        KeyKind::Original => v_init.clone(),
        KeyKind::Averaged => {
            let k = key_averaged(params, fact, prefixes)?;
            params.layers[params.config.edit_layer].w_proj.dot(&k.values)
        }
    };

    let delta = settings.proximity_delta;
    let target = fact.target_new;
    let stop = |o: &Objective<T>| o.mean_prob >= settings.early_stop_prob && o.all_top;
    let (mut obj, grad) = eval_contexts(params, &caches, &v_start, &v_init, delta, target, true);
    if !obj.value.is_finite() {
        return Err(Error::SolverDivergence(format!(
            "non-finite initial objective for fact {}",
            fact.id
        )));
    }
    let initial_logprob = obj.mean_logprob;
    let mut g = grad.expect("gradient requested");
    let mut v = v_start;
    let mut steps_taken = 0usize;
    let mut step = settings.initial_step;

    for _ in 0..settings.max_steps {
        if stop(&obj) {
            break;
        }
        let gnorm = l2_norm(&g);
        if !gnorm.is_finite() {
            return Err(Error::SolverDivergence(format!(
                "non-finite gradient for fact {}",
                fact.id
            )));
        }
        if gnorm == T::zero() {
            break;
        }
        let mut eta = step;
        let mut accepted = None;
        for _ in 0..=settings.max_halvings {
            let v_try = Array1::from_iter((0..v.len()).map(|j| v[j] + eta * g[j]));
            let (obj_try, _) = eval_contexts(params, &caches, &v_try, &v_init, delta, target, false);
            if obj_try.value.is_finite() && obj_try.value >= obj.value {
                accepted = Some((v_try, eta));
                break;
            }
            eta = eta / c::<T>(2.0);
        }
        let Some((v_next, eta_used)) = accepted else { break };
        steps_taken += 1;
        let (obj_next, grad_next) = eval_contexts(params, &caches, &v_next, &v_init, delta, target, true);
        if stop(&obj_next) {
            // Bisect the crossing step down to the smallest one that still
            // clears the stopping rule without losing objective ground.
            let floor = obj.value;
            let mut hi = eta_used;
            let mut lo = T::zero();
            let mut v_hi = v_next;
            let mut obj_hi = obj_next;
            for _ in 0..settings.max_halvings {
                let mid = (lo + hi) / c::<T>(2.0);
                let v_mid = Array1::from_iter((0..v.len()).map(|j| v[j] + mid * g[j]));
                let (obj_mid, _) =
                    eval_contexts(params, &caches, &v_mid, &v_init, delta, target, false);
                if obj_mid.value.is_finite() && obj_mid.value >= floor && stop(&obj_mid) {
                    hi = mid;
                    v_hi = v_mid;
                    obj_hi = obj_mid;
                } else {
                    lo = mid;
                }
            }
            v = v_hi;
            obj = obj_hi;
            break;
        }
        v = v_next;
        obj = obj_next;
        g = grad_next.expect("gradient requested");
        step = eta_used * c::<T>(2.0);
    }

    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::SolverDivergence(format!("non-finite value for fact {}", fact.id)));
    }
    Ok(ValueVector {
        values: v,
        solver_steps: steps_taken,
        initial_target_logprob: initial_logprob,
        final_target_logprob: obj.mean_logprob,
        final_target_prob: obj.mean_prob,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_with_injection, init_model};

    fn test_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 64,
            d_model: 32,
            d_mlp: 64,
            n_layers: 3,
            n_heads: 4,
            max_seq: 24,
            edit_layer: 1,
        }
    }

    fn test_fact() -> Fact {
        Fact {
            id: 0,
            prompt: vec![7, 12, 3, 9],
            subject_last_index: 3,
            target_new: 21,
            target_old: 5,
            paraphrases: vec![],
            neighborhood: vec![],
            adversarial: false,
        }
    }

    #[test]
    fn prefixes_deterministic_and_ranged() {
        let a = make_prefixes(5, (2, 5), 64, 42);
        let b = make_prefixes(5, (2, 5), 64, 42);
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|p| (2..=5).contains(&p.len())));
        assert!(a.iter().flatten().all(|&t| t < 64));
        assert!(make_prefixes(0, (2, 5), 64, 42).is_empty());
        let c = make_prefixes(5, (2, 5), 64, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn fact_validation_catches_bad_fields() {
        let cfg = test_config();
        let mut f = test_fact();
        f.subject_last_index = 99;
        assert!(f.validate(&cfg).is_err());
        let mut f2 = test_fact();
        f2.target_old = f2.target_new;
        assert!(f2.validate(&cfg).is_err());
        let mut f3 = test_fact();
        f3.prompt = vec![999];
        f3.subject_last_index = 0;
        assert!(f3.validate(&cfg).is_err());
        assert!(test_fact().validate(&cfg).is_ok());
    }

    #[test]
    fn original_key_is_the_stored_hook() {
        let cfg = test_config();
        let params = init_model::<f64>(&cfg, 11).unwrap();
        let fact = test_fact();
        let k = key_original(&params, &fact).unwrap();
        let trace = forward(&params, &fact.prompt).unwrap();
        let hook = trace.key_at(cfg.edit_layer, fact.subject_last_index);
        assert_eq!(k.values, hook);
        assert_eq!(k.kind, KeyKind::Original);
        assert_eq!(k.prefix_count, 1);
    }

    #[test]
    fn averaged_with_empty_prefix_degenerates_to_original() {
        let cfg = test_config();
        let params = init_model::<f64>(&cfg, 11).unwrap();
        let fact = test_fact();
        let ko = key_original(&params, &fact).unwrap();
        let ka = key_averaged(&params, &fact, &[vec![]]).unwrap();
        assert_eq!(ko.values, ka.values);
    }

    #[test]
    fn averaged_key_is_mean_of_per_prefix_keys() {
        let cfg = test_config();
        let params = init_model::<f64>(&cfg, 11).unwrap();
        let fact = test_fact();
        let prefixes = make_prefixes(4, (2, 5), cfg.vocab_size, 77);
        let ka = key_averaged(&params, &fact, &prefixes).unwrap();
        let mut mean = Array1::<f64>::zeros(cfg.d_mlp);
        for p in &prefixes {
            let toks: Vec<TokenId> = p.iter().chain(fact.prompt.iter()).copied().collect();
            let tr = forward(&params, &toks).unwrap();
            mean = mean + &tr.key_at(cfg.edit_layer, p.len() + fact.subject_last_index);
        }
        mean.mapv_inplace(|x| x / prefixes.len() as f64);
        let max_diff = ka
            .values
            .iter()
            .zip(mean.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12, "max diff {max_diff}");

        let mut shuffled = prefixes.clone();
        shuffled.reverse();
        let kb = key_averaged(&params, &fact, &shuffled).unwrap();
        let max_perm = ka
            .values
            .iter()
            .zip(kb.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_perm < 1e-12);
    }

    #[test]
    fn averaged_key_rejects_overflow_and_empty() {
        let cfg = test_config();
        let params = init_model::<f64>(&cfg, 11).unwrap();
        let fact = test_fact();
        let long = vec![vec![1u32; cfg.max_seq]];
        assert!(key_averaged(&params, &fact, &long).is_err());
        assert!(key_averaged(&params, &fact, &[]).is_err());
    }

    #[test]
    fn solver_improves_target_logprob_and_hits_target() {
        let cfg = test_config();
        let params = init_model::<f64>(&cfg, 11).unwrap();
        let fact = test_fact();
        let settings = SolverSettings::default();
        let v = solve_value(&params, &fact, KeyKind::Original, &[], &settings).unwrap();
        assert!(v.final_target_logprob > v.initial_target_logprob);
        assert!(v.solver_steps > 0);
        let tr = forward_with_injection(&params, &fact.prompt, fact.subject_last_index, &v.values).unwrap();
        let last = tr.logits.row(fact.prompt.len() - 1);
        let argmax = last
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax as u32, fact.target_new);
    }

    #[test]
    fn averaged_solve_uses_prefixed_contexts() {
        let cfg = test_config();
        let params = init_model::<f64>(&cfg, 11).unwrap();
        let fact = test_fact();
        let prefixes = make_prefixes(3, (2, 4), cfg.vocab_size, 5);
        let settings = SolverSettings { max_steps: 25, ..SolverSettings::default() };
        let v = solve_value(&params, &fact, KeyKind::Averaged, &prefixes, &settings).unwrap();
        assert!(v.final_target_logprob > v.initial_target_logprob);
        assert!(solve_value(&params, &fact, KeyKind::Averaged, &[], &settings).is_err());
    }

    #[test]
    fn huge_penalty_pins_value_to_init() {
        let cfg = test_config();
        let params = init_model::<f64>(&cfg, 11).unwrap();
        let fact = test_fact();
        let settings = SolverSettings {
            proximity_delta: 1e9,
            max_steps: 20,
            ..SolverSettings::default()
        };
        let v = solve_value(&params, &fact, KeyKind::Original, &[], &settings).unwrap();
        let bare = forward(&params, &fact.prompt).unwrap();
        let v_init = bare.layers[cfg.edit_layer].mlp_out.row(fact.subject_last_index).to_owned();
        let drift = v
            .values
            .iter()
            .zip(v_init.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(drift < 1e-4, "drift {drift}");
    }

    #[test]
    fn corrupt_params_raise_solver_divergence() {
        let cfg = test_config();
        let mut params = init_model::<f64>(&cfg, 11).unwrap();
        params.layers[2].w_proj[(0, 0)] = f64::NAN;
        let fact = test_fact();
        let settings = SolverSettings::default();
        assert!(matches!(
            solve_value(&params, &fact, KeyKind::Original, &[], &settings),
            Err(Error::SolverDivergence(_))
        ));
    }
}
