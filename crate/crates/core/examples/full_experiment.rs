//! Runs a whole preset (synthesis, training, personalization, attacks, the
//! temperature sweep, updates and the predictability study) into a directory
//! and prints the headline analysis.
//!
//! `cargo run --release --example full_experiment -- [smoke|desk] [out-dir]`

use std::path::PathBuf;

use pelican::harness::{run_experiment, ExperimentConfig, HEADLINE};

fn main() -> pelican::Result<()> {
    let mut args = std::env::args().skip(1);
    let preset = args.next().unwrap_or_else(|| "smoke".into());
    let out = args.next().map_or_else(|| PathBuf::from("out/example"), PathBuf::from);
    let mut cfg = ExperimentConfig::preset(&preset)?;
    cfg.output_dir = Some(out.clone());
    let report = run_experiment(cfg)?;
    let a = report.analysis.as_ref().expect("analyzed");

    let (adv, strat, prior) = HEADLINE;
    println!("headline attack: {adv:?} {} with the {} prior", strat.name(), prior.name());
    for c in a.cells.iter().filter(|c| (c.adversary, c.strategy, c.prior) == HEADLINE) {
        println!(
            "  T={:<5} top-1 {:>5.1}%  top-3 {:>5.1}% (random {:.1}%)",
            c.temperature,
            c.at(1).unwrap_or(f64::NAN),
            c.at(3).unwrap_or(f64::NAN),
            c.baseline_at(3).unwrap_or(f64::NAN)
        );
    }
    println!("service accuracy preserved: {}", a.service_preserved);
    if let Some(pc) = &a.phase_costs {
        println!("phase 1 / phase 2 CPU ratio: {:.1}", pc.ratio);
    }
    for (name, secs) in &report.stage_seconds {
        println!("  {name:<14} {secs:>7.1}s");
    }
    println!("reports in {}", out.join("reports").display());
    Ok(())
}
