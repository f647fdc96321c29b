// Scratch measurement harness (not part of the deliverable test suite).
use discwalk_core::harness::{baseline_random, generate, GenKind, GeneratorSpec};
use discwalk_core::presets::{preset_komlos, preset_spencer};
use discwalk_core::walk::run_pipeline;
use std::time::Instant;

fn main() {
    let arg: Vec<String> = std::env::args().collect();
    let which = arg.get(1).map(String::as_str).unwrap_or("spencer64");
    match which {
        "spencer" => {
            let n: usize = arg[2].parse().unwrap();
            let seeds: u64 = arg.get(3).map(|s| s.parse().unwrap()).unwrap_or(3);
            let mut discs = Vec::new();
            let t0 = Instant::now();
            for seed in 0..seeds {
                let spec = GeneratorSpec {
                    kind: GenKind::SpencerRandom { m: n, n, density: 0.5 },
                    seed,
                };
                let inst = generate(&spec).unwrap();
                let preset = preset_spencer(&inst).unwrap();
                let mut cfg = preset.config.clone();
                cfg.seed = seed;
                let t1 = Instant::now();
                let out = run_pipeline(&inst, &cfg).unwrap();
                let base = baseline_random(&inst, seed, 100);
                println!(
                    "spencer n={n} seed={seed}: disc={:.1} baseline={:.1} b0={:.1} warn={} steps={} phi_max={:.3e} time={:?}",
                    out.summary.disc, base, cfg.b0, out.summary.warnings, out.summary.steps,
                    out.summary.phi_max, t1.elapsed()
                );
                discs.push(out.summary.disc);
            }
            discs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            println!(
                "median disc = {}, target 2*sqrt(n) = {:.1}, total {:?}",
                discs[discs.len() / 2],
                2.0 * (n as f64).sqrt(),
                t0.elapsed()
            );
        }
        "komlos" => {
            let n: usize = arg[2].parse().unwrap();
            let seeds: u64 = arg.get(3).map(|s| s.parse().unwrap()).unwrap_or(3);
            let mut discs = Vec::new();
            let t0 = Instant::now();
            for seed in 0..seeds {
                let spec = GeneratorSpec { kind: GenKind::KomlosRandomColumns { m: n, n }, seed };
                let inst = generate(&spec).unwrap();
                let kp = preset_komlos(&inst).unwrap();
                let walk_inst = kp.walk_instance.unwrap();
                let mut cfg = kp.preset.config.clone();
                cfg.seed = seed;
                let t1 = Instant::now();
                let out = run_pipeline(&walk_inst, &cfg).unwrap();
                println!(
                    "komlos n={n} seed={seed}: disc={:.2} warn={} steps={} time={:?}",
                    out.summary.disc, out.summary.warnings, out.summary.steps, t1.elapsed()
                );
                discs.push(out.summary.disc);
            }
            discs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            println!(
                "median disc = {:.2}, target 3*sqrt(ln n) = {:.2}, total {:?}",
                discs[discs.len() / 2],
                3.0 * (n as f64).ln().sqrt(),
                t0.elapsed()
            );
        }
        "theory" => {
            let n: usize = arg.get(2).map(|s| s.parse().unwrap()).unwrap_or(6);
            let spec = GeneratorSpec { kind: GenKind::SpencerRandom { m: n, n, density: 0.5 }, seed: 0 };
            let inst = generate(&spec).unwrap();
            let preset = preset_spencer(&inst).unwrap();
            let cfg = preset.config.clone().with_theoretical(n, n);
            println!("theoretical delta = {:.3e}, steps = {}", cfg.delta, cfg.nominal_steps(n));
            let t1 = Instant::now();
            let out = run_pipeline(&inst, &cfg).unwrap();
            println!(
                "theory n={n}: disc={} warn={} steps={} dim_small={} phi_budget_viol={} time={:?}",
                out.summary.disc,
                out.summary.warnings,
                out.summary.steps,
                out.run.audit.dim_slack_small_nt,
                out.run.audit.phi_budget_violations,
                t1.elapsed()
            );
        }
        other => eprintln!("unknown probe {other}"),
    }
}
