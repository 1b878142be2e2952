use std::fs;
use std::time::Instant;

use pelican::harness::{deploy, phase_update, ExperimentConfig, Pipeline};
use pelican::personalize::PersonalizationMethod;
use pelican::seqnet::{load_model, TrainConfig};
use pelican::Error;

fn smoke_in(dir: &std::path::Path) -> Pipeline {
    let mut cfg = ExperimentConfig::smoke();
    cfg.output_dir = Some(dir.to_path_buf());
    let mut p = Pipeline::new(cfg).unwrap();
    p.run_all().unwrap();
    p
}

#[test]
fn smoke_run_is_fast_complete_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let p = smoke_in(a.path());
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "smoke run took {elapsed:?}");

    let c = &p.cfg;
    let defended = c.attack.temperatures.iter().filter(|&&t| t != 1.0).count();
    let per_adversary = c.attack.strategies.len() + defended * c.attack.sweep_strategies.len();
    let expected = c.cohort.n_targets * c.attack.adversaries.len() * c.attack.priors.len() * per_adversary;
    assert_eq!(p.report.attacks.len(), expected);
    assert_eq!(p.attack_reports().len(), expected);
    assert_eq!(p.report.personalization.len(), c.cohort.n_targets * c.methods.len());
    assert!(p.report.analysis.as_ref().unwrap().service_preserved);

    for f in ["summary.json", "attack.csv", "plots/attack_cells.csv", "plots/temperature_sweep.csv", "plots/personalization.csv", "plots/update.csv"] {
        assert!(a.path().join("reports").join(f).exists(), "{f} missing");
    }
    assert!(a.path().join("models/general.json").exists());
    assert!(a.path().join("models/vocab.json").exists());

    smoke_in(b.path());
    for f in ["attack.csv", "plots/attack_cells.csv", "plots/temperature_sweep.csv", "plots/personalization.csv", "plots/update.csv"] {
        let x = fs::read(a.path().join("reports").join(f)).unwrap();
        let y = fs::read(b.path().join("reports").join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }
}

#[test]
fn stages_resume_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::smoke();
    cfg.output_dir = Some(dir.path().to_path_buf());
    cfg.methods = vec![PersonalizationMethod::Reuse, PersonalizationMethod::TlFe];
    cfg.update = None;
    Pipeline::new(cfg.clone()).unwrap().stage_synth().unwrap();
    Pipeline::new(cfg.clone()).unwrap().stage_general().unwrap();
    Pipeline::new(cfg.clone()).unwrap().stage_personalize().unwrap();
    Pipeline::new(cfg.clone()).unwrap().stage_attack(&[1.0], "attack").unwrap();
    let mut r = Pipeline::new(cfg.clone()).unwrap();
    r.stage_report().unwrap();
    let a = r.report.analysis.as_ref().unwrap();
    assert!(a.cells.iter().all(|c| c.temperature == 1.0));
    assert!(!a.cells.is_empty());
    assert!(r.report.general.is_some());

    let m = load_model(dir.path().join("models/p000_TL_FE.json")).unwrap();
    assert_eq!(m.method, Some(PersonalizationMethod::TlFe));
}

#[test]
fn updates_redeploy_and_reject_stale_lineage() {
    let mut cfg = ExperimentConfig::smoke();
    cfg.methods = vec![PersonalizationMethod::TlFe];
    cfg.update = None;
    let mut p = Pipeline::new(cfg).unwrap();
    p.stage_synth().unwrap();
    p.stage_general().unwrap();
    p.stage_personalize().unwrap();
    let g = p.general().unwrap().clone();
    let user = p.users().unwrap()[0].clone();
    let personal = p.personal_model(&user.user_id, PersonalizationMethod::TlFe).unwrap().clone();

    let zero = TrainConfig { max_epochs: 0, ..TrainConfig::default() };
    assert_eq!(phase_update(&g.model, &personal, &g.vocab, &[], &zero).unwrap(), personal);

    let more = TrainConfig { learning_rate: 1e-2, max_epochs: 3, ..TrainConfig::default() };
    let updated = phase_update(&g.model, &personal, &g.vocab, &user.train_windows, &more).unwrap();
    assert_ne!(updated, personal);
    let pairs: Vec<_> = user.test_windows.iter().map(|w| (w.prev2, w.prev1)).collect();
    let served = deploy(&updated, 1.0, 17).unwrap().query_batch(&pairs);
    assert_eq!(served, updated.forward(&g.vocab, &pairs, 1.0).unwrap());
    assert_ne!(served, personal.forward(&g.vocab, &pairs, 1.0).unwrap());

    let mut refreshed = g.model.clone();
    refreshed.params.head.bias[0] += 0.5;
    assert!(matches!(
        phase_update(&refreshed, &personal, &g.vocab, &user.train_windows, &more),
        Err(Error::Contract(_))
    ));
}

#[test]
fn single_contributor_is_rejected() {
    let mut cfg = ExperimentConfig::smoke();
    let cohort = pelican::harness::synthesize(&cfg).unwrap();
    cfg.output_dir = None;
    assert!(matches!(
        pelican::harness::phase_initial_training(&cohort.contributors[..1], &cfg),
        Err(Error::Input(_))
    ));
}
