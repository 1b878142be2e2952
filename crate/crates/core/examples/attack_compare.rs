//! Runs brute force, time-based enumeration and the gradient attack against
//! one personalized model and compares accuracy, queries and time per prior.
//!
//! `cargo run --release --example attack_compare -- [user-index]`

use pelican::harness::{attack_user, ExperimentConfig, GridSpec, Pipeline};
use pelican::inversion::{AdversaryKind, Strategy};

fn main() -> pelican::Result<()> {
    let index: usize = std::env::args().nth(1).map_or(0, |a| a.parse().expect("user index"));
    let mut cfg = ExperimentConfig::smoke();
    cfg.cohort.weeks = 3;
    cfg.attack.max_windows_per_user = Some(8);
    let method = cfg.attack.method;
    let mut p = Pipeline::new(cfg.clone())?;
    p.stage_personalize()?;
    let general = p.general().expect("trained").clone();
    let user = p.users().expect("prepared")[index].clone();
    let model = p.personal_model(&user.user_id, method).expect("personalized");

    let spec = GridSpec {
        settings: &cfg.attack,
        adversaries: &[AdversaryKind::A1, AdversaryKind::A2],
        strategies: &[Strategy::BruteForce, Strategy::TimeBased, Strategy::Gradient],
        sweep_strategies: &[],
        priors: &cfg.attack.priors,
        temperatures: &[1.0],
        seeds: &cfg.seeds,
        collapse: false,
    };
    let out = attack_user(&spec, &general.vocab, &user, index, model)?;
    let candidates = out.service[0].candidates;
    println!("{} ({} model), {} candidate locations", user.user_id, method, candidates);
    println!("{:<3} {:<12} {:<9} {:>6} {:>6} {:>9} {:>9}", "adv", "strategy", "prior", "top-1", "top-3", "queries", "seconds");
    for r in &out.rows {
        let k3 = cfg.attack.k_values.iter().position(|&k| k == 3).expect("k=3 configured");
        println!(
            "{:<3} {:<12} {:<9} {:>5.1}% {:>5.1}% {:>9} {:>9.3}",
            format!("{:?}", r.adversary),
            r.strategy.name(),
            r.prior.name(),
            r.accuracy(0),
            r.accuracy(k3),
            r.queries,
            r.runtime_seconds
        );
    }
    println!("random top-3 baseline {:.1}%", 300.0 / candidates.max(3) as f64);
    Ok(())
}
