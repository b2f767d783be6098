//! Edit-quality metrics: efficacy, generalization, locality, fluency, the
//! composite score, and a held-out probe-retention score.
//!
//! Probabilities are read from the softmax over final-position logits.
//! Percentage metrics are aggregated over facts; sign conventions for the
//! magnitude columns are documented on each function since they vary across
//! the literature.

use crate::error::{Error, Result};
use crate::keyvalue::Fact;
use crate::model::{
    generate, greedy_next, next_token_prob, GenerateMode, ModelParams, TokenId,
};
use crate::scalar::{c, Scalar};
use crate::seeds;
use serde::Serialize;
use std::collections::HashMap;

/// Per-fact efficacy: did the edit prompt flip toward the new target?
/// `success = P(new|p) > P(old|p)`, `magnitude = P(new|p) − P(old|p)`.
pub fn efficacy<T: Scalar>(params_post: &ModelParams<T>, fact: &Fact) -> Result<(bool, T)> {
    let p_new = next_token_prob(params_post, &fact.prompt, fact.target_new)?;
    let p_old = next_token_prob(params_post, &fact.prompt, fact.target_old)?;
    Ok((p_new > p_old, p_new - p_old))
}

/// Paraphrase generalization: efficacy's definitions averaged over the
/// fact's paraphrase prompts. `None` when the fact has no paraphrases.
pub fn generalization<T: Scalar>(
    params_post: &ModelParams<T>,
    fact: &Fact,
) -> Result<Option<(T, T)>> {
    if fact.paraphrases.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    let mut magnitude = T::zero();
    for para in &fact.paraphrases {
        let p_new = next_token_prob(params_post, para, fact.target_new)?;
        let p_old = next_token_prob(params_post, para, fact.target_old)?;
        if p_new > p_old {
            hits += 1;
        }
        magnitude += p_new - p_old;
    }
    let n = c::<T>(fact.paraphrases.len() as f64);
    Ok(Some((c::<T>(hits as f64) / n, magnitude / n)))
}

/// Neighborhood locality. Success counts prompts whose greedy answer under
/// `params_pre` is unchanged under `params_post`; magnitude is the signed
/// probability change of that answer (negative means the edit bled into the
/// neighborhood).
pub fn locality<T: Scalar>(
    params_post: &ModelParams<T>,
    params_pre: &ModelParams<T>,
    fact: &Fact,
) -> Result<(T, T)> {
    if fact.neighborhood.is_empty() {
        return Ok((T::one(), T::zero()));
    }
    let mut hits = 0usize;
    let mut magnitude = T::zero();
    for probe in &fact.neighborhood {
        let answer = greedy_next(params_pre, &probe.prompt)?;
        let post_answer = greedy_next(params_post, &probe.prompt)?;
        if answer == post_answer {
            hits += 1;
        }
        let p_pre = next_token_prob(params_pre, &probe.prompt, answer)?;
        let p_post = next_token_prob(params_post, &probe.prompt, answer)?;
        magnitude += p_post - p_pre;
    }
    let n = c::<T>(fact.neighborhood.len() as f64);
    Ok((c::<T>(hits as f64) / n, magnitude / n))
}

/// Entropy in nats of the empirical n-gram distribution pooled over the
/// given sequences (n-grams never cross sequence boundaries).
pub fn ngram_entropy<T: Scalar>(sequences: &[Vec<TokenId>], n: usize) -> Result<T> {
    if n == 0 {
        return Err(Error::input("n-gram order must be positive"));
    }
    let mut counts: HashMap<&[TokenId], usize> = HashMap::new();
    let mut total = 0usize;
    for seq in sequences {
        for window in seq.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::input(format!(
            "no {n}-grams in sample (sequences too short)"
        )));
    }
    let t = c::<T>(total as f64);
    let mut h = T::zero();
    for &count in counts.values() {
        let q = c::<T>(count as f64) / t;
        h -= q * q.ln();
    }
    Ok(h)
}

/// Fluency: `(2/3)·H3 + (1/3)·H2` over sampled continuations, in nats.
/// Degenerate repetition drives it to zero.
pub fn fluency_ge<T: Scalar>(
    params: &ModelParams<T>,
    probes: &[Vec<TokenId>],
    steps: usize,
    seed: u64,
) -> Result<T> {
    if probes.is_empty() {
        return Err(Error::input("fluency needs at least one probe prompt"));
    }
    if steps < 3 {
        return Err(Error::input("fluency needs at least 3 generated tokens"));
    }
    let temperature = c::<T>(1.0);
    let mut continuations = Vec::with_capacity(probes.len());
    for (i, prompt) in probes.iter().enumerate() {
        let gen_seed = seeds::derive(seed, "fluency", i as u64);
        let full = generate(params, prompt, steps, GenerateMode::Sample { temperature }, gen_seed)?;
        continuations.push(full[prompt.len()..].to_vec());
    }
    let h3 = ngram_entropy::<T>(&continuations, 3)?;
    let h2 = ngram_entropy::<T>(&continuations, 2)?;
    let third = c::<T>(1.0 / 3.0);
    Ok(c::<T>(2.0) * third * h3 + third * h2)
}

/// Harmonic mean of the three percentage metrics; zero if any is zero.
pub fn composite_score<T: Scalar>(es: T, ps: T, ns: T) -> T {
    if es <= T::zero() || ps <= T::zero() || ns <= T::zero() {
        return T::zero();
    }
    c::<T>(3.0) / (es.recip() + ps.recip() + ns.recip())
}

/// Greedy next-token answers for a probe set, used as the retention
/// baseline before any edit is applied.
pub fn greedy_answers<T: Scalar>(
    params: &ModelParams<T>,
    probes: &[Vec<TokenId>],
) -> Result<Vec<TokenId>> {
    probes.iter().map(|p| greedy_next(params, p)).collect()
}

/// Fraction of probes whose greedy answer matches the recorded baseline.
pub fn probe_retention<T: Scalar>(
    params_post: &ModelParams<T>,
    probes: &[Vec<TokenId>],
    baseline: &[TokenId],
) -> Result<T> {
    if probes.is_empty() {
        return Err(Error::input("probe retention needs a non-empty probe set"));
    }
    if probes.len() != baseline.len() {
        return Err(Error::input("probe set and baseline length mismatch"));
    }
    let mut hits = 0usize;
    for (probe, &answer) in probes.iter().zip(baseline.iter()) {
        if greedy_next(params_post, probe)? == answer {
            hits += 1;
        }
    }
    Ok(c::<T>(hits as f64) / c::<T>(probes.len() as f64))
}

/// Aggregated Table-style metric row. Percentages are in [0, 100];
/// magnitudes are probability differences scaled by 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRecord<T> {
    pub es: T,
    pub em: T,
    pub ps: T,
    pub pm: T,
    pub ns: T,
    pub nm: T,
    pub ge: T,
    pub s: T,
    pub probe_retention: T,
}

/// Per-fact raw scores feeding the aggregate record.
#[derive(Debug, Clone, Copy)]
pub struct FactScores<T> {
    pub efficacy_success: bool,
    pub efficacy_magnitude: T,
    /// (success fraction, mean magnitude) over paraphrases, if any.
    pub paraphrase: Option<(T, T)>,
    /// (success fraction, mean signed probability change) over neighborhood.
    pub neighborhood: (T, T),
}

pub fn score_fact<T: Scalar>(
    params_post: &ModelParams<T>,
    params_pre: &ModelParams<T>,
    fact: &Fact,
) -> Result<FactScores<T>> {
    let (efficacy_success, efficacy_magnitude) = efficacy(params_post, fact)?;
    let paraphrase = generalization(params_post, fact)?;
    let neighborhood = locality(params_post, params_pre, fact)?;
    Ok(FactScores { efficacy_success, efficacy_magnitude, paraphrase, neighborhood })
}

/// Folds per-fact scores into the percentage metrics and composite score.
pub fn aggregate<T: Scalar>(scores: &[FactScores<T>], ge: T, retention: T) -> Result<MetricRecord<T>> {
    if scores.is_empty() {
        return Err(Error::input("no fact scores to aggregate"));
    }
    let hundred = c::<T>(100.0);
    let n = c::<T>(scores.len() as f64);
    let es = c::<T>(scores.iter().filter(|s| s.efficacy_success).count() as f64) / n * hundred;
    let em = scores.iter().map(|s| s.efficacy_magnitude).sum::<T>() / n * hundred;
    let with_para: Vec<(T, T)> = scores.iter().filter_map(|s| s.paraphrase).collect();
    let (ps, pm) = if with_para.is_empty() {
        (T::zero(), T::zero())
    } else {
        let np = c::<T>(with_para.len() as f64);
        (
            with_para.iter().map(|&(s, _)| s).sum::<T>() / np * hundred,
            with_para.iter().map(|&(_, m)| m).sum::<T>() / np * hundred,
        )
    };
    let ns = scores.iter().map(|s| s.neighborhood.0).sum::<T>() / n * hundred;
    let nm = scores.iter().map(|s| s.neighborhood.1).sum::<T>() / n * hundred;
    let s = composite_score(es, ps, ns);
    Ok(MetricRecord { es, em, ps, pm, ns, nm, ge, s, probe_retention: retention })
}
