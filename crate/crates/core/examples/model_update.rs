//! Personalizes on the first week of each target's data, then updates the
//! model with everything collected since and redeploys it.
//!
//! `cargo run --release --example model_update`

use pelican::harness::{deploy, phase_update, top123, update_study, ExperimentConfig, Pipeline};
use pelican::personalize::PersonalizationMethod;

fn main() -> pelican::Result<()> {
    let mut cfg = ExperimentConfig::smoke();
    cfg.cohort.weeks = 4;
    let settings = cfg.update.clone().expect("smoke preset has an update study");
    let mut p = Pipeline::new(cfg.clone())?;
    p.stage_general()?;
    p.stage_personalize()?;
    let general = p.general().expect("trained").clone();
    let users = p.users().expect("prepared").to_vec();

    println!("{:<5} {:<13} {:>8} {:>8} {:>8} {:>8}", "user", "method", "windows", "test@1", "windows", "test@1");
    for (i, user) in users.iter().enumerate() {
        for method in [PersonalizationMethod::PersonalLstm, PersonalizationMethod::TlFe, PersonalizationMethod::TlFt] {
            let mut pc = cfg.personalize.clone();
            pc.train.seed ^= i as u64;
            let o = update_study(&general, user, method, &settings, &pc)?;
            println!(
                "{:<5} {:<13} {:>8} {:>7.1}% {:>8} {:>7.1}%",
                o.user, o.method.name(), o.initial_windows, o.initial_test[0], o.updated_windows, o.updated_test[0]
            );
        }
    }

    // A redeployed update answers with the new parameters.
    let user = &users[0];
    let personal = p.personal_model(&user.user_id, PersonalizationMethod::TlFe).expect("personalized");
    let updated = phase_update(&general.model, personal, &general.vocab, &user.train_windows, &settings.train)?;
    let before = top123(&deploy(personal, 1.0, 4)?, &user.test_windows)?;
    let after = top123(&deploy(&updated, 1.0, 4)?, &user.test_windows)?;
    println!("{} redeployed: test top-1 {:.1}% -> {:.1}%", user.user_id, before[0], after[0]);
    Ok(())
}
