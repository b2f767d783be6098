//! Command-line harness for edit campaigns.
//!
//! Every subcommand derives its entire state from the config file and master
//! seed, so runs are reproducible end to end. A collapse during a sequential
//! run is an observation, not a failure: the process still exits zero and
//! the trace records what happened. Nonzero exit codes are reserved for bad
//! input (2), bad configuration (3), I/O trouble (4), and numerical failure
//! inside the stack (5).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use romekit_core::campaign::{
    build_covariance, build_dataset, build_model, build_probes, emit_outputs, parse_trace_csv,
    run_sequential, run_single, EditTrace,
};
use romekit_core::config::RunConfig;
use romekit_core::dataset::SyntheticFactSet;
use romekit_core::diagnostics::generation_entropy;
use romekit_core::editor::{CovarianceEstimate, Method};
use romekit_core::model::ModelParams;
use romekit_core::{Error, Result};

/// Environment variable naming the default output directory.
const OUT_ENV: &str = "ROMEKIT_OUT";

#[derive(Parser)]
#[command(
    name = "romekit",
    version,
    about = "Rank-one model editing campaigns on a small trained transformer"
)]
struct Cli {
    /// Config file, JSON or `key=value` lines; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; falls back to $ROMEKIT_OUT, then ./romekit-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CampaignArgs {
    /// Editing method: original, r-rome, or p-rome.
    #[arg(long, default_value = "r-rome")]
    method: String,
    /// Fact set JSON produced by make-data; generated fresh when omitted.
    #[arg(long)]
    facts: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model and write the synthetic fact set as JSON.
    MakeData {
        /// Destination file; defaults to <out>/facts.json.
        #[arg(long)]
        facts: Option<PathBuf>,
    },
    /// Edit a fresh copy of the base model per fact and score each edit.
    Edit {
        #[command(flatten)]
        campaign: CampaignArgs,
    },
    /// Apply edits cumulatively to one evolving model.
    Sequential {
        #[command(flatten)]
        campaign: CampaignArgs,
        /// Record diagnostics every this many edits.
        #[arg(long)]
        cadence: Option<usize>,
        /// Stop at the first collapse-flagged edit instead of continuing.
        #[arg(long)]
        halt_on_collapse: bool,
    },
    /// Print base-model health: training outcome, entropy, key covariance.
    Diagnose,
    /// Summarize a finished run from its output directory.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("romekit: {err}");
            ExitCode::from(match err {
                Error::Config(_) => 3,
                Error::Io(_) => 4,
                Error::Numerical(_) | Error::SolverDivergence(_) => 5,
                _ => 2,
            })
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = out_dir(cli);
    match &cli.command {
        Command::MakeData { facts } => {
            let (params, c0) = prepare(&cfg)?;
            let set = build_dataset(&params, &c0, &cfg)?;
            let path = facts.clone().unwrap_or_else(|| out.join("facts.json"));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            set.save(&path)?;
            let adversarial = set.facts.iter().filter(|f| f.adversarial).count();
            println!(
                "wrote {} facts ({adversarial} adversarial) to {}",
                set.facts.len(),
                path.display()
            );
            Ok(())
        }
        Command::Edit { campaign } => {
            let method: Method = campaign.method.parse()?;
            let (params, c0) = prepare(&cfg)?;
            let set = load_or_make_facts(&params, &c0, &cfg, campaign.facts.as_deref())?;
            let trace = run_single(&params, &c0, &set.facts, method, &cfg)?;
            emit_outputs(&trace, &out)?;
            print_trace_summary(&trace, &out);
            Ok(())
        }
        Command::Sequential { campaign, cadence, halt_on_collapse } => {
            let method: Method = campaign.method.parse()?;
            let mut cfg = cfg;
            if let Some(c) = cadence {
                cfg.campaign.cadence = *c;
            }
            if *halt_on_collapse {
                cfg.campaign.halt_on_collapse = true;
            }
            cfg.validate()?;
            let (params, c0) = prepare(&cfg)?;
            let set = load_or_make_facts(&params, &c0, &cfg, campaign.facts.as_deref())?;
            let (trace, _) = run_sequential(&params, &c0, &set.facts, method, &cfg)?;
            emit_outputs(&trace, &out)?;
            print_trace_summary(&trace, &out);
            Ok(())
        }
        Command::Diagnose => diagnose(&cfg),
        Command::Report => report(&out),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("romekit-out"))
}

fn prepare(cfg: &RunConfig) -> Result<(ModelParams<f64>, CovarianceEstimate<f64>)> {
    let (params, report) = build_model::<f64>(cfg)?;
    eprintln!(
        "base model: {} training steps, loss {:.4}, task accuracy {:.3}",
        report.steps_run, report.final_loss, report.accuracy
    );
    let c0 = build_covariance(&params, cfg)?;
    Ok((params, c0))
}

fn load_or_make_facts(
    params: &ModelParams<f64>,
    c0: &CovarianceEstimate<f64>,
    cfg: &RunConfig,
    path: Option<&Path>,
) -> Result<SyntheticFactSet> {
    match path {
        Some(p) => SyntheticFactSet::load(p),
        None => build_dataset(params, c0, cfg),
    }
}

fn print_trace_summary(trace: &EditTrace<f64>, out: &Path) {
    let collapse = match trace.first_collapse() {
        Some(i) => format!("collapse first flagged at edit {i}"),
        None => "no collapse".to_string(),
    };
    println!(
        "{} {} over {} edits: {collapse}, max |delta| {:.3e}, retention {}",
        if trace.sequential { "sequential" } else { "single" },
        trace.method,
        trace.rows.len(),
        trace.max_delta_norm(),
        trace
            .final_retention()
            .map(|r| format!("{r:.3}"))
            .unwrap_or_else(|| "n/a".to_string()),
    );
    if let Some(agg) = &trace.aggregate {
        println!(
            "scores: ES {:.1} PS {:.1} NS {:.1} S {:.1}",
            agg.es, agg.ps, agg.ns, agg.s
        );
    }
    println!("outputs in {}", out.display());
}

fn diagnose(cfg: &RunConfig) -> Result<()> {
    let (params, c0) = prepare(cfg)?;
    let set = build_dataset(&params, &c0, cfg)?;
    let panel = build_probes(&params, &set.facts, cfg)?;
    let (entropy, _) = generation_entropy(
        &params,
        &panel.entropy_prompts,
        cfg.campaign.entropy_gen_len,
        romekit_core::seeds::derive(cfg.master_seed, "entropy-base", 0),
    )?;
    println!("baseline normalized entropy: {entropy:.3}");
    println!(
        "key covariance: {} samples, ridge {:.3e}",
        c0.sample_count, c0.ridge
    );
    let mut benign = Vec::new();
    let mut adversarial = Vec::new();
    let settings = cfg.edit_settings::<f64>();
    for fact in &set.facts {
        let prefixes = romekit_core::editor::fact_prefixes(&params, fact, &settings);
        let k_avg = romekit_core::keyvalue::key_averaged(&params, fact, &prefixes)?;
        let k_o = romekit_core::keyvalue::key_original(&params, fact)?;
        let angle = c0.whitened_angle(&k_avg.values, &k_o.values)?;
        if fact.adversarial {
            adversarial.push(angle);
        } else {
            benign.push(angle);
        }
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    println!(
        "whitened angle between averaged and bare keys: benign mean {:.3} rad over {}, adversarial mean {:.3} rad over {}",
        mean(&benign),
        benign.len(),
        mean(&adversarial),
        adversarial.len()
    );
    Ok(())
}

fn report(out: &Path) -> Result<()> {
    let summary_path = out.join("summary.json");
    let text = std::fs::read_to_string(&summary_path)?;
    let summary: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::input(format!("summary decode: {e}")))?;
    println!("run summary from {}:", summary_path.display());
    for key in [
        "method",
        "sequential",
        "master_seed",
        "n_edits",
        "collapsed",
        "first_collapse_index",
        "baseline_entropy",
        "max_delta_norm",
        "final_probe_retention",
        "wall_time_s",
    ] {
        if let Some(v) = summary.get(key) {
            println!("  {key}: {v}");
        }
    }
    if let Some(agg) = summary.get("aggregate").filter(|v| !v.is_null()) {
        println!("  aggregate: {agg}");
    }
    let rows = parse_trace_csv(&std::fs::read_to_string(out.join("trace.csv"))?)?;
    let measured = rows.iter().filter(|r| r.normalized_entropy.is_some()).count();
    println!("trace: {} rows, {measured} with diagnostics", rows.len());
    for row in rows.iter().filter(|r| r.collapsed) {
        println!(
            "  collapse at edit {} (|delta| {:.3e}, entropy {:.3})",
            row.edit_index,
            row.delta_norm,
            row.normalized_entropy.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
