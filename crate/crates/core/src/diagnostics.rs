//! Disabling-edit detection: normalized update norms, generation entropy,
//! collapse classification.
//!
//! A disabling edit announces itself two ways: the rank-one update is orders
//! of magnitude larger than its neighbors, and post-edit sampling degenerates
//! into near-constant token streams. Both signals are cheap to compute and
//! are recorded for every edit in a campaign.

use crate::editor::UpdateDelta;
use crate::error::{Error, Result};
use crate::linalg::l2_norm;
use crate::model::{generate, GenerateMode, ModelParams, TokenId};
use crate::scalar::{c, Scalar};
use crate::seeds;
use ndarray::Array2;

/// Frobenius norm of the assembled update divided by its element count.
/// For a factored rank-one update the Frobenius norm is exactly
/// `|column| · |row|`.
pub fn delta_norm<T: Scalar>(delta: &UpdateDelta<T>) -> T {
    let elements = c::<T>((delta.column.len() * delta.row.len()) as f64);
    l2_norm(&delta.column) * l2_norm(&delta.row) / elements
}

/// Same norm computed from an explicit matrix.
pub fn delta_norm_matrix<T: Scalar>(delta: &Array2<T>) -> T {
    let elements = c::<T>(delta.len() as f64);
    delta.iter().map(|&x| x * x).sum::<T>().sqrt() / elements
}

/// Entropy of the empirical unigram distribution over `tokens`, normalized
/// by `log(vocab_size)` into [0, 1].
pub fn unigram_normalized_entropy<T: Scalar>(
    tokens: &[TokenId],
    vocab_size: usize,
) -> Result<T> {
    if tokens.is_empty() {
        return Err(Error::input("no tokens to compute entropy over"));
    }
    if vocab_size < 2 {
        return Err(Error::input("vocab_size must be at least 2"));
    }
    let mut counts = vec![0usize; vocab_size];
    for &t in tokens {
        let idx = t as usize;
        if idx >= vocab_size {
            return Err(Error::input(format!("token {t} out of vocabulary")));
        }
        counts[idx] += 1;
    }
    let total = c::<T>(tokens.len() as f64);
    let mut h = T::zero();
    for &count in &counts {
        if count > 0 {
            let q = c::<T>(count as f64) / total;
            h -= q * q.ln();
        }
    }
    Ok(h / c::<T>(vocab_size as f64).ln())
}

/// Samples a continuation from every probe prompt and returns the normalized
/// unigram entropy of the pooled generated tokens plus the continuations
/// themselves. Deterministic per seed.
pub fn generation_entropy<T: Scalar>(
    params: &ModelParams<T>,
    probes: &[Vec<TokenId>],
    steps: usize,
    seed: u64,
) -> Result<(T, Vec<Vec<TokenId>>)> {
    if probes.is_empty() {
        return Err(Error::input("generation entropy needs at least one probe prompt"));
    }
    let temperature = c::<T>(1.0);
    let mut pooled = Vec::with_capacity(probes.len() * steps);
    let mut continuations = Vec::with_capacity(probes.len());
    for (i, prompt) in probes.iter().enumerate() {
        let gen_seed = seeds::derive(seed, "gen", i as u64);
        let full = generate(params, prompt, steps, GenerateMode::Sample { temperature }, gen_seed)?;
        let cont: Vec<TokenId> = full[prompt.len()..].to_vec();
        pooled.extend_from_slice(&cont);
        continuations.push(cont);
    }
    let entropy = unigram_normalized_entropy::<T>(&pooled, params.config.vocab_size)?;
    Ok((entropy, continuations))
}

#[derive(Debug, Clone, Copy)]
pub struct CollapseThresholds<T> {
    /// Entropy floor: below this the model has degenerated.
    pub tau: T,
    /// Norm spike factor relative to the running median of prior edits.
    pub kappa: T,
}

impl<T: Scalar> Default for CollapseThresholds<T> {
    fn default() -> Self {
        CollapseThresholds { tau: c::<T>(0.2), kappa: c::<T>(100.0) }
    }
}

/// Median of a slice; `None` when empty.
pub fn median<T: Scalar>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        return None;
    }
    let mut sorted: Vec<T> = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        Some(sorted[mid])
    } else {
        Some((sorted[mid - 1] + sorted[mid]) / c::<T>(2.0))
    }
}

/// An edit is collapse-flagged when entropy falls below tau or its norm
/// exceeds kappa times the median of the prior edits' norms. The norm rule
/// needs history; the first edit can only be flagged by entropy.
pub fn classify_collapse<T: Scalar>(
    delta_norm: T,
    normalized_entropy: T,
    prior_norms: &[T],
    thresholds: &CollapseThresholds<T>,
) -> bool {
    if normalized_entropy < thresholds.tau {
        return true;
    }
    match median(prior_norms) {
        Some(med) if med > T::zero() => delta_norm > thresholds.kappa * med,
        _ => false,
    }
}

/// Per-edit diagnostic record.
#[derive(Debug, Clone)]
pub struct DiagnosticReport<T> {
    pub delta_norm: T,
    pub normalized_entropy: T,
    pub collapsed: bool,
    pub generation_sample: Vec<Vec<TokenId>>,
}

/// Composes sampling, entropy, and classification for one applied edit.
pub fn diagnose<T: Scalar>(
    params: &ModelParams<T>,
    delta_norm: T,
    probes: &[Vec<TokenId>],
    steps: usize,
    seed: u64,
    prior_norms: &[T],
    thresholds: &CollapseThresholds<T>,
) -> Result<DiagnosticReport<T>> {
    let (normalized_entropy, generation_sample) = generation_entropy(params, probes, steps, seed)?;
    let collapsed = classify_collapse(delta_norm, normalized_entropy, prior_norms, thresholds);
    Ok(DiagnosticReport { delta_norm, normalized_entropy, collapsed, generation_sample })
}
