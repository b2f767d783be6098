//! Scratch calibration harness for the trained-model editing flow.

use romekit_core::campaign::{
    build_covariance, build_dataset, build_model, run_sequential, run_single,
};
use romekit_core::config::RunConfig;
use romekit_core::editor::Method;
use std::time::Instant;

fn main() {
    for master in [1234u64, 2024, 31337] {
        let t0 = Instant::now();
        let mut cfg = RunConfig::default();
        cfg.master_seed = master;

        let (params, report) = build_model::<f64>(&cfg).unwrap();
        let c0 = build_covariance(&params, &cfg).unwrap();
        println!(
            "seed {master}: trained {} steps, loss {:.3}, acc {:.3}, setup {:.0}s",
            report.steps_run,
            report.final_loss,
            report.accuracy,
            t0.elapsed().as_secs_f64()
        );

        // Sequential separation at the default solver stop.
        let mut cfg8 = cfg.clone();
        cfg8.dataset.n_facts = 100;
        cfg8.dataset.n_adversarial = 20;
        let t8 = Instant::now();
        let set8 = build_dataset(&params, &c0, &cfg8).unwrap();
        let (orig, _) = run_sequential(&params, &c0, &set8.facts, Method::Original, &cfg8).unwrap();
        let (rr, _) = run_sequential(&params, &c0, &set8.facts, Method::RRome, &cfg8).unwrap();
        let ratio = rr.max_delta_norm() / orig.max_delta_norm();
        println!(
            "  seq orig: collapsed {} (first {:?}) ret {:?} max_norm {:.3e} | r-rome: collapsed {} ret {:?} max_norm {:.3e} | ratio {:.2e} | {:.0}s",
            orig.collapsed(),
            orig.first_collapse(),
            orig.final_retention(),
            orig.max_delta_norm(),
            rr.collapsed(),
            rr.final_retention(),
            rr.max_delta_norm(),
            ratio,
            t8.elapsed().as_secs_f64()
        );
        let c8 = orig.collapsed()
            && orig.final_retention().unwrap() < 0.5
            && !rr.collapsed()
            && rr.final_retention().unwrap() >= 0.8
            && ratio <= 0.01;
        println!("  criterion8 {}", if c8 { "PASS" } else { "FAIL" });

        // Single-edit score comparison at a stricter solver stop.
        for n_prefixes in [5usize, 8] {
            let mut cfg9 = cfg.clone();
            cfg9.solver.early_stop_prob = 0.9;
            cfg9.n_prefixes = n_prefixes;
            let t9 = Instant::now();
            let set9 = build_dataset(&params, &c0, &cfg9).unwrap();
            let mut s = std::collections::HashMap::new();
            let mut ps = std::collections::HashMap::new();
            for method in [Method::Original, Method::RRome, Method::PRome] {
                let trace = run_single(&params, &c0, &set9.facts, method, &cfg9).unwrap();
                let agg = trace.aggregate.unwrap();
                s.insert(method.to_string(), agg.s);
                ps.insert(method.to_string(), agg.ps);
                println!(
                    "  single np={n_prefixes} {:>8}: ES {:.1} PS {:.1} NS {:.1} S {:.1}",
                    method.to_string(),
                    agg.es,
                    agg.ps,
                    agg.ns,
                    agg.s
                );
            }
            let c9 = s["r-rome"] > s["original"] && ps["r-rome"] >= ps["p-rome"];
            println!(
                "  criterion9 np={n_prefixes} {} (S margin {:+.1}, PS margin {:+.1}) | {:.0}s",
                if c9 { "PASS" } else { "FAIL" },
                s["r-rome"] - s["original"],
                ps["r-rome"] - ps["p-rome"],
                t9.elapsed().as_secs_f64()
            );
        }
        println!("seed {master} total {:.0}s\n", t0.elapsed().as_secs_f64());
    }
}
