mod common;

use pelican::inversion::{
    attack_gradient, attack_targets, build_prior, AdversaryConfig, AdversaryKind, AttackContext, GradientConfig,
    PriorMode, WhiteBox,
};
use pelican::seqnet::{init_model, ArchConfig};
use pelican::synth::{generate_user, CohortRole};

#[test]
fn rankings_lead_with_the_discretized_reconstruction() {
    let spec = common::toy_spec();
    let vocab = spec.vocab.clone();
    let all: Vec<usize> = (0..vocab.len()).collect();
    let arch = ArchConfig::stacked(vocab.encoded_width(), 8, 2, vocab.len());
    let model = init_model(&arch, &vocab, 3).unwrap();
    let trace = generate_user(&spec.sample_profile(CohortRole::Target, 3), 1, spec.start_date).unwrap();
    let targets = attack_targets(&trace, &vocab).unwrap();
    let priors = vec![build_prior(PriorMode::True, Some(&trace), None, &[], &vocab).unwrap()];
    let cfg = GradientConfig { steps: 20, ..GradientConfig::default() };
    let wb = WhiteBox { model: &model, temperature: 1.0 };

    for kind in [AdversaryKind::A1, AdversaryKind::A2, AdversaryKind::A3] {
        let adv = AdversaryConfig::new(kind, PriorMode::True);
        let ctx = AttackContext { adversary: &adv, vocab: &vocab, priors: &priors, candidates: &all, tie_seed: 9 };
        for (i, t) in targets.iter().enumerate().take(6) {
            let first = attack_gradient(&ctx, &wb, t, i, &cfg).unwrap();
            let again = attack_gradient(&ctx, &wb, t, i, &cfg).unwrap();
            assert_eq!(first, again);
            for w in &first {
                assert_eq!(w.rankings.len(), kind.unknown_steps().len());
                for r in &w.rankings {
                    let mut seen = r.locations.clone();
                    seen.sort_unstable();
                    assert_eq!(seen, all);
                    // One point estimate per step: a single 1, the rest tied at 0.
                    let expected_top = if w.failed { 0.0 } else { 1.0 };
                    assert_eq!(r.scores[0], expected_top);
                    assert!(r.scores[1..].iter().all(|&s| s == 0.0));
                }
            }
        }
    }
}
