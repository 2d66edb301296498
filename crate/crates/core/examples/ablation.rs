//! Runs the three-arm ablation and the lambda sweep on the default synthetic
//! task and prints mean test mA.
//!
//! Optional JSON overrides: `cargo run --release --example ablation -- cfg.json`
//! where the file holds an `ExperimentConfig`.

use std::time::Instant;

use aap_core::experiment::{ablation, default_lambda_grid, lambda_sweep, ExperimentConfig};
use aap_core::model::Arm;
use aap_core::SyntheticSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg: ExperimentConfig = match args.first() {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    let spec_for = |seed: u64| match args.get(1) {
        Some(path) => {
            let mut s: SyntheticSpec = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
            s.seed = seed;
            s
        }
        None => SyntheticSpec::default_entangled(seed),
    };
    let seeds: Vec<u64> = (0..5).collect();

    let t = Instant::now();
    let summary = ablation(spec_for, &seeds, 0.2, &cfg)?;
    for arm in [Arm::Baseline, Arm::Multibranch, Arm::Cocnn] {
        let per = &summary.per_arm.iter().find(|(a, _)| *a == arm).unwrap().1;
        println!(
            "{arm:<12} mean mA {:.2}  per-seed {:?}",
            100.0 * summary.mean_ma(arm).unwrap(),
            per.iter()
                .map(|v| (1000.0 * v).round() / 10.0)
                .collect::<Vec<_>>()
        );
    }
    println!("ablation took {:.1?}", t.elapsed());

    if std::env::var("SWEEP").is_ok() {
        let t = Instant::now();
        for p in lambda_sweep(spec_for, &seeds, &default_lambda_grid(), &cfg)? {
            println!("lambda {:.2}  mA {:.2}", p.lambda, 100.0 * p.mean_ma);
        }
        println!("sweep took {:.1?}", t.elapsed());
    }
    Ok(())
}
