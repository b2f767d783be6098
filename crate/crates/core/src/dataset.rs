//! Synthetic fact generation, including the adversarial subset.
//!
//! Facts are random token prompts whose subject span ends at the final
//! position. The generator scores a candidate pool by the whitened angle
//! between each prompt's averaged and bare keys and promotes the widest
//! angles to the adversarial subset; those are the prompts whose mixed
//! denominator `k_eᵀC0⁻¹k_e^o` collapses under the asymmetric update rule.
//! Counterfact targets are the base model's runner-up next token, the
//! plausible alternative the model itself almost preferred. Paraphrases are
//! prefix-perturbed copies drawn from a held-out seed stream, and
//! neighborhood probes record the base model's greedy answers.

use crate::editor::{fact_prefixes, CovarianceEstimate, EditSettings};
use crate::error::{Error, Result};
use crate::keyvalue::{key_averaged, key_original, make_prefixes, Fact, NeighborProbe};
use crate::model::{greedy_next, next_token_distribution, ModelParams, TokenId};
use crate::scalar::Scalar;
use crate::seeds;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub n_facts: usize,
    /// Facts selected for maximal averaged-vs-bare key divergence.
    pub n_adversarial: usize,
    pub n_paraphrases: usize,
    pub n_neighborhood: usize,
    pub prompt_len_range: (usize, usize),
    /// Candidate prompts scored per selected fact.
    pub pool_factor: usize,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            n_facts: 50,
            n_adversarial: 10,
            n_paraphrases: 3,
            n_neighborhood: 3,
            prompt_len_range: (4, 8),
            pool_factor: 8,
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_facts == 0 {
            return Err(Error::input("dataset needs at least one fact"));
        }
        if self.n_adversarial > self.n_facts {
            return Err(Error::input("adversarial count exceeds fact count"));
        }
        let (lo, hi) = self.prompt_len_range;
        if lo < 1 || hi < lo {
            return Err(Error::input("invalid prompt length range"));
        }
        if self.pool_factor < 1 {
            return Err(Error::input("pool_factor must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticFactSet {
    pub master_seed: u64,
    pub params: DatasetParams,
    pub facts: Vec<Fact>,
}

impl SyntheticFactSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::input(format!("fact set encode: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::input(format!("fact set decode: {e}")))
    }

    pub fn validate<T: Scalar>(&self, params: &ModelParams<T>) -> Result<()> {
        let mut seen = HashSet::new();
        for fact in &self.facts {
            fact.validate(&params.config)?;
            if !seen.insert(fact.prompt.clone()) {
                return Err(Error::input(format!("duplicate prompt in fact {}", fact.id)));
            }
        }
        Ok(())
    }
}

fn contains_window(haystack: &[TokenId], needle: &[TokenId]) -> bool {
    needle.len() <= haystack.len()
        && haystack.windows(needle.len()).any(|w| w == needle)
}

fn random_prompt(rng: &mut ChaCha8Rng, len_range: (usize, usize), vocab: usize) -> Vec<TokenId> {
    let len = rng.random_range(len_range.0..=len_range.1);
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Generates the fact set. The adversarial subset is chosen by ranking a
/// candidate pool on the whitened angle between averaged and bare keys,
/// computed with the same per-fact prefix streams the editor will use, so
/// the ranking holds at edit time.
pub fn make_dataset<T: Scalar>(
    params: &ModelParams<T>,
    c0: &CovarianceEstimate<T>,
    dp: &DatasetParams,
    edit_settings: &EditSettings<T>,
) -> Result<SyntheticFactSet> {
    dp.validate()?;
    let cfg = &params.config;
    let vocab = cfg.vocab_size;
    let (lo, hi) = dp.prompt_len_range;
    if hi + edit_settings.prefix_len_range.1 > cfg.max_seq {
        return Err(Error::input("prompt plus prefix cannot fit in max_seq"));
    }
    let capacity: f64 = (lo..=hi).map(|l| (vocab as f64).powi(l as i32)).sum();
    let pool_size = dp.n_facts * dp.pool_factor;
    if (pool_size as f64) > capacity * 0.5 {
        return Err(Error::input(format!(
            "{} distinct prompts requested but capacity is only ~{capacity:.0}",
            pool_size
        )));
    }
    let master = edit_settings.master_seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(master, "dataset", 0));

    let mut pool: Vec<Vec<TokenId>> = Vec::with_capacity(pool_size);
    let mut seen = HashSet::new();
    let mut attempts = 0usize;
    while pool.len() < pool_size {
        attempts += 1;
        if attempts > pool_size * 100 {
            return Err(Error::input("could not draw enough distinct prompts"));
        }
        let prompt = random_prompt(&mut rng, (lo, hi), vocab);
        if seen.insert(prompt.clone()) {
            pool.push(prompt);
        }
    }

    // Score every candidate by whitened key divergence.
    let mut scored: Vec<(f64, Vec<TokenId>)> = Vec::with_capacity(pool_size);
    for prompt in pool {
        let probe_fact = Fact {
            id: 0,
            prompt: prompt.clone(),
            subject_last_index: prompt.len() - 1,
            target_new: 1,
            target_old: 0,
            paraphrases: vec![],
            neighborhood: vec![],
            adversarial: false,
        };
        let prefixes = fact_prefixes(params, &probe_fact, edit_settings);
        let k_avg = key_averaged(params, &probe_fact, &prefixes)?;
        let k_o = key_original(params, &probe_fact)?;
        let angle = c0
            .whitened_angle(&k_avg.values, &k_o.values)?
            .to_f64()
            .unwrap_or(0.0);
        scored.push((angle, prompt));
    }
    // Adversarial picks are the angles closest to a right angle, where the
    // mixed denominator crosses zero; regular picks are the most aligned
    // pairs. Ties broken by prompt bytes for platform-independent ordering.
    let right_angle = std::f64::consts::FRAC_PI_2;
    scored.sort_by(|a, b| {
        let da = (a.0 - right_angle).abs();
        let db = (b.0 - right_angle).abs();
        da.partial_cmp(&db).unwrap().then_with(|| a.1.cmp(&b.1))
    });
    let adversarial_prompts: Vec<Vec<TokenId>> = scored
        .iter()
        .take(dp.n_adversarial)
        .map(|(_, p)| p.clone())
        .collect();
    // Benign picks are the remaining prompts whose top two next-token logits
    // are closest. Near-tie facts need only a small injected value, which
    // keeps the cumulative side effects of a long edit sequence small.
    let rest: Vec<&(f64, Vec<TokenId>)> = scored.iter().skip(dp.n_adversarial).collect();
    let n_benign = dp.n_facts - dp.n_adversarial;
    let mut by_margin: Vec<(f64, &Vec<TokenId>)> = Vec::with_capacity(rest.len());
    for (_, prompt) in rest {
        let probs = next_token_distribution(params, prompt)?;
        let mut top = (T::neg_infinity(), T::neg_infinity());
        for &p in &probs {
            if p > top.0 {
                top = (p, top.0);
            } else if p > top.1 {
                top.1 = p;
            }
        }
        let margin = (top.0.ln() - top.1.ln()).to_f64().unwrap_or(f64::INFINITY);
        by_margin.push((margin, prompt));
    }
    by_margin.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(b.1)));
    let benign_prompts: Vec<Vec<TokenId>> =
        by_margin.iter().take(n_benign).map(|(_, p)| (*p).clone()).collect();

    let mut entries: Vec<(Vec<TokenId>, bool)> = adversarial_prompts
        .into_iter()
        .map(|p| (p, true))
        .chain(benign_prompts.into_iter().map(|p| (p, false)))
        .collect();
    // Deterministic interleave so adversarial facts land at varied indices
    // in sequential runs.
    let mut order_rng = ChaCha8Rng::seed_from_u64(seeds::derive(master, "order", 0));
    for i in (1..entries.len()).rev() {
        let j = order_rng.random_range(0..=i);
        entries.swap(i, j);
    }

    let fact_prompt_set: HashSet<Vec<TokenId>> =
        entries.iter().map(|(p, _)| p.clone()).collect();
    let mut facts = Vec::with_capacity(dp.n_facts);
    for (id, (prompt, adversarial)) in entries.into_iter().enumerate() {
        let content = seeds::token_hash(&prompt);
        let target_old = greedy_next(params, &prompt)?;
        let probs = next_token_distribution(params, &prompt)?;
        let mut target_new = if target_old == 0 { 1 } else { 0 };
        for (i, &p) in probs.iter().enumerate() {
            let i = i as TokenId;
            if i != target_old && p > probs[target_new as usize] {
                target_new = i;
            }
        }

        let paraphrase_prefixes = make_prefixes(
            dp.n_paraphrases,
            edit_settings.prefix_len_range,
            vocab,
            seeds::derive(master, "paraphrase", content),
        );
        let paraphrases: Vec<Vec<TokenId>> = paraphrase_prefixes
            .into_iter()
            .map(|pre| pre.into_iter().chain(prompt.iter().copied()).collect())
            .collect();

        let mut nb_rng = ChaCha8Rng::seed_from_u64(seeds::derive(master, "neighborhood", content));
        let mut neighborhood = Vec::with_capacity(dp.n_neighborhood);
        let mut nb_seen = HashSet::new();
        let mut nb_attempts = 0usize;
        while neighborhood.len() < dp.n_neighborhood {
            nb_attempts += 1;
            if nb_attempts > dp.n_neighborhood * 200 {
                return Err(Error::input("could not draw distinct neighborhood prompts"));
            }
            let probe = random_prompt(&mut nb_rng, (lo, hi), vocab);
            if contains_window(&probe, &prompt)
                || fact_prompt_set.contains(&probe)
                || !nb_seen.insert(probe.clone())
            {
                continue;
            }
            let expected = greedy_next(params, &probe)?;
            neighborhood.push(NeighborProbe { prompt: probe, expected });
        }

        let fact = Fact {
            id: id as u32,
            subject_last_index: prompt.len() - 1,
            prompt,
            target_new,
            target_old,
            paraphrases,
            neighborhood,
            adversarial,
        };
        fact.validate(cfg)?;
        facts.push(fact);
    }

    let set = SyntheticFactSet { master_seed: master, params: *dp, facts };
    set.validate(params)?;
    Ok(set)
}
