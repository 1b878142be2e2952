//! Deploys one personalized model behind the black-box handle at a range of
//! temperatures. The ranking users see stays fixed while the confidences the
//! adversary scores collapse towards 0/1 and the time-based attack weakens.
//!
//! `cargo run --release --example temperature_defense`

use pelican::harness::{attack_user, deploy, top123, ExperimentConfig, GridSpec, Pipeline};
use pelican::inversion::{AdversaryKind, PriorMode, Strategy};

fn main() -> pelican::Result<()> {
    let mut cfg = ExperimentConfig::smoke();
    cfg.cohort.weeks = 3;
    cfg.attack.max_windows_per_user = Some(10);
    let method = cfg.attack.method;
    let mut p = Pipeline::new(cfg.clone())?;
    p.stage_personalize()?;
    let general = p.general().expect("trained").clone();
    let user = p.users().expect("prepared")[0].clone();
    let model = p.personal_model(&user.user_id, method).expect("personalized");

    let w = &user.test_windows[0];
    let temps = [1.0, 0.5, 0.1, 0.05, 0.01];
    println!("one query, label {}:", w.label);
    for t in temps {
        let h = deploy(model, t, cfg.attack.precision)?;
        let a = h.query(w.prev2, w.prev1)?;
        let shown: Vec<String> = a.ranked.iter().take(4).map(|&l| format!("{l}:{:.4}", a.confidences[l])).collect();
        println!("  T={t:<5} {}", shown.join("  "));
    }

    let spec = GridSpec {
        settings: &cfg.attack,
        adversaries: &[AdversaryKind::A1],
        strategies: &[Strategy::TimeBased],
        sweep_strategies: &[Strategy::TimeBased],
        priors: &[PriorMode::True],
        temperatures: &temps,
        seeds: &cfg.seeds,
        collapse: true,
    };
    let out = attack_user(&spec, &general.vocab, &user, 0, model)?;
    println!("{:<6} {:>10} {:>10} {:>9}", "T", "service@3", "attack@1", "collapsed");
    for (i, t) in temps.iter().enumerate() {
        let service = top123(&deploy(model, *t, cfg.attack.precision)?, &user.test_windows)?;
        let c = &out.collapse[i].fractions;
        println!(
            "{t:<6} {:>9.2}% {:>9.1}% {:>8.0}%",
            service[2],
            out.rows[i].accuracy(0),
            100.0 * c.iter().sum::<f64>() / c.len().max(1) as f64
        );
    }
    Ok(())
}
