//! Single and sequential edit campaigns with per-edit traces.
//!
//! A campaign turns a trained model plus a fact set into an [`EditTrace`]:
//! one row per applied edit carrying the update norm, solver stats, and per
//! fact metrics, with entropy, retention, and collapse diagnostics recorded
//! on a configurable cadence. Single campaigns edit a fresh copy of the base
//! model per fact; sequential campaigns accumulate edits in one evolving
//! model, which is where the two key readings pull apart.
//!
//! Traces serialize to `trace.csv` (fixed column order, see [`TRACE_HEADER`]),
//! `summary.json`, and `scatter.csv`. Wall times live in the summary only, so
//! repeated runs with one config produce byte-identical CSV files.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::{make_dataset, SyntheticFactSet};
use crate::diagnostics::{classify_collapse, generation_entropy};
use crate::editor::{edit, estimate_c0_relative, CovarianceEstimate, Method};
use crate::error::{Error, Result};
use crate::keyvalue::Fact;
use crate::metrics::{
    aggregate, greedy_answers, probe_retention, score_fact, FactScores, MetricRecord,
};
use crate::model::{init_model, ModelParams, TokenId};
use crate::scalar::Scalar;
use crate::seeds;
use crate::train::{train_model, AssociationTask, TrainReport};

/// One applied edit. Diagnostic fields are populated on cadence edits and
/// absent otherwise; metrics are scored for every edit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow<T> {
    pub edit_index: usize,
    pub method: Method,
    pub fact_id: u32,
    pub adversarial: bool,
    pub delta_norm: T,
    pub solver_steps: usize,
    /// Probability of the new target on the bare prompt after this edit.
    pub post_prob_new: T,
    pub normalized_entropy: Option<T>,
    pub collapsed: bool,
    pub probe_retention: Option<T>,
    pub metrics: MetricRecord<T>,
}

/// Full record of a campaign.
#[derive(Debug, Clone, Serialize)]
pub struct EditTrace<T> {
    pub method: Method,
    pub master_seed: u64,
    pub sequential: bool,
    pub baseline_entropy: T,
    pub rows: Vec<TraceRow<T>>,
    /// Metrics folded over all facts, with the campaign-level entropy and
    /// retention attached.
    pub aggregate: Option<MetricRecord<T>>,
    /// Edit index at which a halt-on-collapse run stopped.
    pub halted_at: Option<usize>,
    /// Seconds spent applying edits and scoring, excluding setup.
    pub wall_time_s: f64,
}

impl<T: Scalar> EditTrace<T> {
    pub fn collapsed(&self) -> bool {
        self.rows.iter().any(|r| r.collapsed)
    }

    pub fn first_collapse(&self) -> Option<usize> {
        self.rows.iter().find(|r| r.collapsed).map(|r| r.edit_index)
    }

    pub fn max_delta_norm(&self) -> T {
        self.rows.iter().map(|r| r.delta_norm).fold(T::zero(), T::max)
    }

    /// Last recorded probe retention, if any cadence row exists.
    pub fn final_retention(&self) -> Option<T> {
        self.rows.iter().rev().find_map(|r| r.probe_retention)
    }
}

/// Fixed probe panel held constant across one campaign: retention prompts
/// with confident baseline answers, and prompts for generation entropy.
#[derive(Debug, Clone)]
pub struct ProbePanel<T> {
    pub retention_prompts: Vec<Vec<TokenId>>,
    pub retention_baseline: Vec<TokenId>,
    pub entropy_prompts: Vec<Vec<TokenId>>,
    pub baseline_entropy: T,
}

fn random_seqs(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(0..vocab as u32)).collect())
        .collect()
}

/// Draws retention probes the campaign may legitimately expect to survive:
/// the base model answers them with a top-1 log-margin of at least
/// `probe_margin`, and their final token differs from every edited fact's
/// final prompt token, so no probe shares a subject with an edit.
pub fn build_probes<T: Scalar>(
    params: &ModelParams<T>,
    facts: &[Fact],
    config: &RunConfig,
) -> Result<ProbePanel<T>> {
    let cp = &config.campaign;
    let vocab = params.config.vocab_size as u32;
    let edited_lasts: std::collections::HashSet<TokenId> =
        facts.iter().filter_map(|f| f.prompt.last().copied()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.master_seed, "probe", 0));
    let theta = crate::scalar::c::<T>(cp.probe_margin);
    let mut retention_prompts = Vec::with_capacity(cp.n_probes);
    let mut attempts = 0usize;
    while retention_prompts.len() < cp.n_probes {
        attempts += 1;
        if attempts > cp.n_probes * 2000 {
            return Err(Error::input(format!(
                "only {} of {} probes reached log-margin {} after {attempts} draws",
                retention_prompts.len(),
                cp.n_probes,
                cp.probe_margin
            )));
        }
        let probe: Vec<TokenId> =
            (0..cp.probe_len).map(|_| rng.random_range(0..vocab)).collect();
        if edited_lasts.contains(probe.last().expect("probe_len validated nonzero")) {
            continue;
        }
        let probs = crate::model::next_token_distribution(params, &probe)?;
        let mut top = (T::zero(), T::zero());
        for &p in &probs {
            if p > top.0 {
                top = (p, top.0);
            } else if p > top.1 {
                top.1 = p;
            }
        }
        if top.0.ln() - top.1.ln() >= theta {
            retention_prompts.push(probe);
        }
    }
    let retention_baseline = greedy_answers(params, &retention_prompts)?;
    let entropy_prompts = random_seqs(
        cp.entropy_probes,
        cp.entropy_prompt_len,
        params.config.vocab_size,
        seeds::derive(config.master_seed, "eprobe", 0),
    );
    let (baseline_entropy, _) = generation_entropy(
        params,
        &entropy_prompts,
        cp.entropy_gen_len,
        seeds::derive(config.master_seed, "entropy-base", 0),
    )?;
    Ok(ProbePanel { retention_prompts, retention_baseline, entropy_prompts, baseline_entropy })
}

/// Initializes and trains the base model per the config.
pub fn build_model<T: Scalar>(config: &RunConfig) -> Result<(ModelParams<T>, TrainReport<T>)> {
    let mut params =
        init_model::<T>(&config.model, seeds::derive(config.master_seed, "model", 0))?;
    let task = AssociationTask::permutation(
        config.model.vocab_size,
        seeds::derive(config.master_seed, "task", 0),
    );
    let report = train_model(&mut params, &task, &config.train_settings())?;
    Ok((params, report))
}

/// Estimates the key covariance over a seeded random corpus.
pub fn build_covariance<T: Scalar>(
    params: &ModelParams<T>,
    config: &RunConfig,
) -> Result<CovarianceEstimate<T>> {
    let corpus = random_seqs(
        config.corpus.n_seqs,
        config.corpus.seq_len,
        config.model.vocab_size,
        seeds::derive(config.master_seed, "corpus", 0),
    );
    estimate_c0_relative(params, &corpus, crate::scalar::c(config.corpus.ridge_rel))
}

/// Generates the fact set dictated by the config.
pub fn build_dataset<T: Scalar>(
    params: &ModelParams<T>,
    c0: &CovarianceEstimate<T>,
    config: &RunConfig,
) -> Result<SyntheticFactSet> {
    make_dataset(params, c0, &config.dataset, &config.edit_settings::<T>())
}

struct RowBudget {
    cadence: usize,
    total: usize,
}

impl RowBudget {
    /// Diagnostics run every `cadence` edits and always on the final edit, so
    /// a trace never ends on an unmeasured row.
    fn measures(&self, index: usize) -> bool {
        (index + 1) % self.cadence == 0 || index + 1 == self.total
    }
}

#[allow(clippy::too_many_arguments)]
fn trace_row<T: Scalar>(
    index: usize,
    fact: &Fact,
    method: Method,
    current: &ModelParams<T>,
    base: &ModelParams<T>,
    outcome: &crate::editor::EditOutcome<T>,
    panel: &ProbePanel<T>,
    config: &RunConfig,
    prior_norms: &[T],
    budget: &RowBudget,
) -> Result<(TraceRow<T>, FactScores<T>)> {
    let scores = score_fact(current, base, fact)?;
    let metrics = aggregate(std::slice::from_ref(&scores), T::zero(), T::zero())?;
    let (entropy, retention, collapsed) = if budget.measures(index) {
        let (h, _) = generation_entropy(
            current,
            &panel.entropy_prompts,
            config.campaign.entropy_gen_len,
            seeds::derive(config.master_seed, "entropy", index as u64),
        )?;
        let r = probe_retention(current, &panel.retention_prompts, &panel.retention_baseline)?;
        let fired =
            classify_collapse(outcome.delta_norm, h, prior_norms, &config.collapse_thresholds());
        (Some(h), Some(r), fired)
    } else {
        (None, None, false)
    };
    Ok((
        TraceRow {
            edit_index: index,
            method,
            fact_id: fact.id,
            adversarial: fact.adversarial,
            delta_norm: outcome.delta_norm,
            solver_steps: outcome.solver_steps,
            post_prob_new: outcome.post_prob_new,
            normalized_entropy: entropy,
            collapsed,
            probe_retention: retention,
            metrics,
        },
        scores,
    ))
}

fn mean_of<T: Scalar>(values: impl Iterator<Item = T>) -> T {
    let mut sum = T::zero();
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        T::zero()
    } else {
        sum / crate::scalar::c::<T>(n as f64)
    }
}

fn finish_trace<T: Scalar>(
    mut trace: EditTrace<T>,
    scores: &[FactScores<T>],
    started: Instant,
) -> Result<EditTrace<T>> {
    if !scores.is_empty() {
        let ge = mean_of(trace.rows.iter().filter_map(|r| r.normalized_entropy));
        let retention = trace.final_retention().unwrap_or_else(T::one);
        trace.aggregate = Some(aggregate(scores, ge, retention)?);
    }
    trace.wall_time_s = started.elapsed().as_secs_f64();
    Ok(trace)
}

/// Applies each fact to a fresh copy of the base model and scores it.
pub fn run_single<T: Scalar>(
    base: &ModelParams<T>,
    c0: &CovarianceEstimate<T>,
    facts: &[Fact],
    method: Method,
    config: &RunConfig,
) -> Result<EditTrace<T>> {
    let started = Instant::now();
    let panel = build_probes(base, facts, config)?;
    let settings = config.edit_settings::<T>();
    let budget = RowBudget { cadence: config.campaign.cadence, total: facts.len() };
    let mut trace = EditTrace {
        method,
        master_seed: config.master_seed,
        sequential: false,
        baseline_entropy: panel.baseline_entropy,
        rows: Vec::with_capacity(facts.len()),
        aggregate: None,
        halted_at: None,
        wall_time_s: 0.0,
    };
    let mut norms: Vec<T> = Vec::with_capacity(facts.len());
    let mut scores: Vec<FactScores<T>> = Vec::with_capacity(facts.len());
    for (i, fact) in facts.iter().enumerate() {
        let (edited, outcome) = edit(base, fact, method, c0, &settings)?;
        let (row, fs) =
            trace_row(i, fact, method, &edited, base, &outcome, &panel, config, &norms, &budget)?;
        norms.push(outcome.delta_norm);
        scores.push(fs);
        trace.rows.push(row);
    }
    finish_trace(trace, &scores, started)
}

/// Applies the facts cumulatively to one evolving model. Returns the trace
/// together with the final model state. A collapse flag halts the run only
/// when the config says so; otherwise the degraded model keeps editing and
/// the trace records what becomes of it.
pub fn run_sequential<T: Scalar>(
    base: &ModelParams<T>,
    c0: &CovarianceEstimate<T>,
    facts: &[Fact],
    method: Method,
    config: &RunConfig,
) -> Result<(EditTrace<T>, ModelParams<T>)> {
    let started = Instant::now();
    let panel = build_probes(base, facts, config)?;
    let settings = config.edit_settings::<T>();
    let budget = RowBudget { cadence: config.campaign.cadence, total: facts.len() };
    let mut trace = EditTrace {
        method,
        master_seed: config.master_seed,
        sequential: true,
        baseline_entropy: panel.baseline_entropy,
        rows: Vec::with_capacity(facts.len()),
        aggregate: None,
        halted_at: None,
        wall_time_s: 0.0,
    };
    let mut current = base.clone();
    let mut norms: Vec<T> = Vec::with_capacity(facts.len());
    let mut scores: Vec<FactScores<T>> = Vec::with_capacity(facts.len());
    for (i, fact) in facts.iter().enumerate() {
        let (next, outcome) = edit(&current, fact, method, c0, &settings)?;
        current = next;
        let (row, fs) =
            trace_row(i, fact, method, &current, base, &outcome, &panel, config, &norms, &budget)?;
        norms.push(outcome.delta_norm);
        scores.push(fs);
        let fired = row.collapsed;
        trace.rows.push(row);
        if fired && config.campaign.halt_on_collapse {
            trace.halted_at = Some(i);
            break;
        }
    }
    let trace = finish_trace(trace, &scores, started)?;
    Ok((trace, current))
}

/// Column order of `trace.csv`. Optional diagnostic cells are empty on rows
/// where the cadence skipped measurement.
pub const TRACE_HEADER: &str = "edit_index,method,fact_id,adversarial,delta_norm,solver_steps,\
post_prob_new,normalized_entropy,collapsed,probe_retention,es,em,ps,pm,ns,nm,ge,s";

/// Floats print with nine significant digits so traces are compact yet
/// reproduce to within one part in 1e8.
fn fmt9<T: Scalar>(x: T) -> String {
    format!("{:.8e}", x.to_f64().expect("scalar converts to f64"))
}

fn fmt9_opt<T: Scalar>(x: Option<T>) -> String {
    x.map(fmt9).unwrap_or_default()
}

fn trace_csv<T: Scalar>(trace: &EditTrace<T>) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in &trace.rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.edit_index,
            r.method,
            r.fact_id,
            r.adversarial,
            fmt9(r.delta_norm),
            r.solver_steps,
            fmt9(r.post_prob_new),
            fmt9_opt(r.normalized_entropy),
            r.collapsed,
            fmt9_opt(r.probe_retention),
            fmt9(m.es),
            fmt9(m.em),
            fmt9(m.ps),
            fmt9(m.pm),
            fmt9(m.ns),
            fmt9(m.nm),
            fmt9(m.ge),
            fmt9(m.s),
        ));
    }
    out
}

fn scatter_csv<T: Scalar>(trace: &EditTrace<T>) -> String {
    let mut out = String::from("delta_norm,normalized_entropy\n");
    for r in &trace.rows {
        out.push_str(&format!("{},{}\n", fmt9(r.delta_norm), fmt9_opt(r.normalized_entropy)));
    }
    out
}

#[derive(Debug, Serialize)]
struct Summary<'a, T> {
    method: String,
    master_seed: u64,
    sequential: bool,
    n_edits: usize,
    collapsed: bool,
    first_collapse_index: Option<usize>,
    halted_at: Option<usize>,
    baseline_entropy: T,
    max_delta_norm: T,
    final_probe_retention: Option<T>,
    aggregate: &'a Option<MetricRecord<T>>,
    wall_time_s: f64,
}

/// Writes `trace.csv`, `summary.json`, and `scatter.csv` under `out_dir`,
/// creating it if needed.
pub fn emit_outputs<T: Scalar + Serialize>(trace: &EditTrace<T>, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("trace.csv"), trace_csv(trace))?;
    std::fs::write(out_dir.join("scatter.csv"), scatter_csv(trace))?;
    let summary = Summary {
        method: trace.method.to_string(),
        master_seed: trace.master_seed,
        sequential: trace.sequential,
        n_edits: trace.rows.len(),
        collapsed: trace.collapsed(),
        first_collapse_index: trace.first_collapse(),
        halted_at: trace.halted_at,
        baseline_entropy: trace.baseline_entropy,
        max_delta_norm: trace.max_delta_norm(),
        final_probe_retention: trace.final_retention(),
        aggregate: &trace.aggregate,
        wall_time_s: trace.wall_time_s,
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::numerical(format!("summary serialization failed: {e}")))?;
    std::fs::write(out_dir.join("summary.json"), json + "\n")?;
    Ok(())
}

/// Parses a `trace.csv` back into rows. Numeric fields round-trip to the
/// printed nine significant digits.
pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow<f64>>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::input("empty trace file"))?;
    if header != TRACE_HEADER {
        return Err(Error::input("unrecognized trace header"));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let expect = TRACE_HEADER.split(',').count();
        if fields.len() != expect {
            return Err(Error::input(format!(
                "trace line {}: {} fields, expected {expect}",
                lineno + 2,
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::input(format!("trace line {}: bad number", lineno + 2)))
        };
        let opt_num = |i: usize| -> Result<Option<f64>> {
            if fields[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        let flag = |i: usize| -> Result<bool> {
            fields[i]
                .parse()
                .map_err(|_| Error::input(format!("trace line {}: bad flag", lineno + 2)))
        };
        rows.push(TraceRow {
            edit_index: num(0)? as usize,
            method: fields[1].parse()?,
            fact_id: num(2)? as u32,
            adversarial: flag(3)?,
            delta_norm: num(4)?,
            solver_steps: num(5)? as usize,
            post_prob_new: num(6)?,
            normalized_entropy: opt_num(7)?,
            collapsed: flag(8)?,
            probe_retention: opt_num(9)?,
            metrics: MetricRecord {
                es: num(10)?,
                em: num(11)?,
                ps: num(12)?,
                pm: num(13)?,
                ns: num(14)?,
                nm: num(15)?,
                ge: num(16)?,
                s: num(17)?,
                probe_retention: opt_num(9)?.unwrap_or(0.0),
            },
        });
    }
    Ok(rows)
}
