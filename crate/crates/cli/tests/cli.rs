//! End-to-end tests of the binary: subcommands, exit codes, reproducibility.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_romekit");

/// Small-model config so each invocation trains in seconds.
const TINY_CONFIG: &str = "\
master_seed=7
model.vocab_size=48
model.d_model=16
model.d_mlp=32
model.n_layers=3
model.n_heads=2
model.max_seq=32
model.edit_layer=1
train.steps=300
dataset.n_facts=6
dataset.n_adversarial=2
dataset.prompt_len_range=[3, 5]
campaign.n_probes=6
campaign.probe_margin=1.0
campaign.entropy_probes=3
campaign.entropy_gen_len=6
";

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path
}

fn romekit(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("ROMEKIT_OUT").output().unwrap()
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn sequential_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let res = romekit(&[
            "sequential",
            "--method",
            "r-rome",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_success(&res);
    }
    let trace_a = std::fs::read(out_a.join("trace.csv")).unwrap();
    let trace_b = std::fs::read(out_b.join("trace.csv")).unwrap();
    assert!(!trace_a.is_empty());
    assert_eq!(trace_a, trace_b);
    let scatter_a = std::fs::read(out_a.join("scatter.csv")).unwrap();
    let scatter_b = std::fs::read(out_b.join("scatter.csv")).unwrap();
    assert_eq!(scatter_a, scatter_b);
}

#[test]
fn make_data_feeds_edit_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let facts = dir.path().join("facts.json");
    let out = dir.path().join("run");
    let res = romekit(&[
        "make-data",
        "--config",
        cfg.to_str().unwrap(),
        "--facts",
        facts.to_str().unwrap(),
    ]);
    assert_success(&res);
    assert!(facts.exists());
    let listing = std::fs::read_to_string(&facts).unwrap();
    assert!(listing.contains("\"adversarial\": true"));

    let res = romekit(&[
        "edit",
        "--method",
        "p-rome",
        "--facts",
        facts.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_success(&res);
    for file in ["trace.csv", "summary.json", "scatter.csv"] {
        assert!(out.join(file).exists(), "{file} missing");
    }

    let res = romekit(&["report", "--out", out.to_str().unwrap()]);
    assert_success(&res);
    let text = String::from_utf8_lossy(&res.stdout).to_string();
    assert!(text.contains("p-rome"));
    assert!(text.contains("6 rows"));
}

#[test]
fn seed_flag_changes_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for (out, seed) in [(&out_a, "7"), (&out_b, "8")] {
        let res = romekit(&[
            "edit",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_success(&res);
    }
    let trace_a = std::fs::read(out_a.join("trace.csv")).unwrap();
    let trace_b = std::fs::read(out_b.join("trace.csv")).unwrap();
    assert_ne!(trace_a, trace_b);
}

#[test]
fn out_env_var_supplies_default_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("from-env");
    let res = Command::new(BIN)
        .args(["edit", "--config", cfg.to_str().unwrap()])
        .env("ROMEKIT_OUT", &out)
        .output()
        .unwrap();
    assert_success(&res);
    assert!(out.join("trace.csv").exists());
}

#[test]
fn bad_method_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let res = romekit(&["edit", "--method", "mend", "--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn bad_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "solver.early_stop_prob=2.0\n").unwrap();
    let res = romekit(&["diagnose", "--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3));

    std::fs::write(&cfg, "model.vocabulary=big\n").unwrap();
    let res = romekit(&["diagnose", "--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn missing_files_are_io_errors() {
    let res = romekit(&["report", "--out", "/nonexistent/romekit-run"]);
    assert_eq!(res.status.code(), Some(4));
    let res = romekit(&["diagnose", "--config", "/nonexistent/romekit.cfg"]);
    assert_eq!(res.status.code(), Some(4));
}

#[test]
fn diagnose_prints_key_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let res = romekit(&["diagnose", "--config", cfg.to_str().unwrap()]);
    assert_success(&res);
    let text = String::from_utf8_lossy(&res.stdout).to_string();
    assert!(text.contains("baseline normalized entropy"));
    assert!(text.contains("whitened angle"));
}
