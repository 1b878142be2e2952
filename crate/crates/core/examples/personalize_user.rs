//! Trains a small general model, then personalizes it for each target with
//! all four methods and prints train/test top-k and CPU cost side by side.
//!
//! `cargo run --release --example personalize_user -- [weeks]`

use pelican::harness::{phase_initial_training, phase_personalize, prepare_user, synthesize, ExperimentConfig};
use pelican::personalize::PersonalizationMethod;

fn main() -> pelican::Result<()> {
    let weeks: u32 = std::env::args().nth(1).map_or(4, |a| a.parse().expect("weeks"));
    let mut cfg = ExperimentConfig::smoke();
    cfg.cohort.weeks = weeks;
    let cohort = synthesize(&cfg)?;
    let general = phase_initial_training(&cohort.contributors, &cfg)?;
    println!(
        "general model: hidden {}, test top-1 {:.1}%, {:.1}s CPU",
        general.info.hidden_size, general.info.test_accuracy[0], general.info.cost.cpu_seconds
    );

    println!("{:<5} {:<13} {:>7} {:>7} {:>7} {:>7} {:>8}", "user", "method", "train@1", "test@1", "test@2", "test@3", "cpu");
    for trace in &cohort.targets {
        let user = prepare_user(trace, &general.vocab, cfg.train_fraction)?;
        for method in PersonalizationMethod::ALL {
            let p = phase_personalize(&general, &user, method, &cfg.personalize)?;
            println!(
                "{:<5} {:<13} {:>6.1}% {:>6.1}% {:>6.1}% {:>6.1}% {:>7.2}s",
                user.user_id,
                p.model.method.unwrap_or(method).name(),
                p.train_accuracy[0],
                p.test_accuracy[0],
                p.test_accuracy[1],
                p.test_accuracy[2],
                p.cost.cpu_seconds
            );
        }
    }
    Ok(())
}
