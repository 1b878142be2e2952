//! Checks shared by the focused test files and the acceptance runner.
//! Each returns a short summary on success and the first violation otherwise.
#![allow(dead_code)]

use ndarray::Array2;
use pelican::harness::deploy;
use pelican::inversion::{
    attack_brute_force, attack_targets, attack_time_based, build_prior, AdversaryConfig, AdversaryKind,
    AttackContext, BruteForceFilter, PriorMode,
};
use pelican::seqnet::{
    argsort_desc, dense_inputs, init_model, loss_and_grads, softmax_with_temperature, ArchConfig, GradTarget,
    SeqModel,
};
use pelican::synth::{generate_user, CohortRole, CohortSpec};
use pelican::trace::{DomainVocab, EncodedStep, Scale, Window, DAYS_PER_WEEK, DURATION_BINS, ENTRY_SLOTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn vocab(n: usize) -> DomainVocab {
    DomainVocab::from_locations(Scale::Building, (0..n).map(|i| format!("l{i}")))
}

pub fn random_step(rng: &mut ChaCha8Rng, n_loc: usize) -> EncodedStep {
    EncodedStep {
        location: rng.gen_range(0..n_loc),
        slot: rng.gen_range(0..ENTRY_SLOTS),
        duration_bin: rng.gen_range(0..DURATION_BINS),
        day: rng.gen_range(0..DAYS_PER_WEEK),
    }
}

pub fn random_pairs(n_loc: usize, count: usize, seed: u64) -> Vec<(EncodedStep, EncodedStep)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (random_step(&mut rng, n_loc), random_step(&mut rng, n_loc))).collect()
}

fn scale_head(m: &mut SeqModel, by: f64) {
    let head = m.params.n_layers() - 1;
    for s in m.params.layer_slices_mut(head) {
        s.iter_mut().for_each(|x| *x *= by);
    }
}

// ---- gradients ----

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
/// Below this magnitude gradients are compared absolutely.
const FLOOR: f64 = 1e-6;

fn gradient_case(seed: u64) -> (SeqModel, Vec<Window>) {
    let v = vocab(5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.gen_range(1..=3);
    let mut arch = ArchConfig::stacked(v.encoded_width(), 8, layers, 5);
    arch.dropout = 0.0;
    let mut model = init_model(&arch, &v, seed).unwrap();
    // Push activations out of the linear regime.
    for i in 0..model.params.n_layers() {
        for s in model.params.layer_slices_mut(i) {
            for x in s.iter_mut() {
                *x *= 3.0 * rng.gen::<f64>() + 0.5;
            }
        }
    }
    let windows = (0..4)
        .map(|t| Window {
            prev2: random_step(&mut rng, 5),
            prev1: random_step(&mut rng, 5),
            label: rng.gen_range(0..5),
            time: t,
        })
        .collect();
    (model, windows)
}

fn dense_loss(model: &SeqModel, inputs: &[Array2<f64>; 2], labels: &[usize]) -> f64 {
    let z = model.logits_dense(inputs.clone());
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = z.row(r);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    loss / labels.len() as f64
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Analytic parameter and input gradients against central differences on 50 tiny models.
pub fn gradient_check() -> Check {
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for seed in 0..50 {
        let (model, windows) = gradient_case(seed);
        let labels: Vec<usize> = windows.iter().map(|w| w.label).collect();
        let inputs = dense_inputs(&windows, 5);

        let (_, g) = loss_and_grads(&model, &windows, GradTarget::Parameters).map_err(|e| e.to_string())?;
        let mut probe = model.clone();
        for layer in 0..model.params.n_layers() {
            let analytic: Vec<Vec<f64>> = g.params.layer_slices(layer).iter().map(|s| s.to_vec()).collect();
            for (t, tensor) in analytic.iter().enumerate() {
                for (j, &a) in tensor.iter().enumerate() {
                    let orig = probe.params.layer_slices(layer)[t][j];
                    probe.params.layer_slices_mut(layer)[t][j] = orig + EPS;
                    let up = dense_loss(&probe, &inputs, &labels);
                    probe.params.layer_slices_mut(layer)[t][j] = orig - EPS;
                    let down = dense_loss(&probe, &inputs, &labels);
                    probe.params.layer_slices_mut(layer)[t][j] = orig;
                    let n = (up - down) / (2.0 * EPS);
                    let e = rel_err(a, n);
                    worst = worst.max(e);
                    compared += 1;
                    if e >= TOL {
                        return Err(format!("seed {seed} layer {layer} tensor {t}[{j}]: analytic {a}, numeric {n}"));
                    }
                }
            }
        }

        let (_, g) = loss_and_grads(&model, &windows, GradTarget::Inputs).map_err(|e| e.to_string())?;
        let gi = g.inputs.ok_or("no input gradients")?;
        for step in 0..2 {
            let mut x = inputs.clone();
            for idx in 0..x[step].len() {
                let (r, c) = (idx / x[step].ncols(), idx % x[step].ncols());
                let orig = x[step][[r, c]];
                x[step][[r, c]] = orig + EPS;
                let up = dense_loss(&model, &x, &labels);
                x[step][[r, c]] = orig - EPS;
                let down = dense_loss(&model, &x, &labels);
                x[step][[r, c]] = orig;
                let n = (up - down) / (2.0 * EPS);
                let a = gi[step][[r, c]];
                let e = rel_err(a, n);
                worst = worst.max(e);
                compared += 1;
                if e >= TOL {
                    return Err(format!("seed {seed} input step {step} [{r},{c}]: analytic {a}, numeric {n}"));
                }
            }
        }
    }
    Ok(format!("{compared} partials, worst relative error {worst:.2e}"))
}

// ---- temperature ----

pub const TEMPERATURES: [f64; 5] = [0.01, 0.5, 1.0, 2.0, 10.0];

/// Softmax sums and exact order over 1000 random logit vectors at every temperature.
pub fn softmax_population() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for v in 0..1000 {
        let n = rng.gen_range(2..=20);
        // Spread below 745·0.01 so no probability underflows to an exact tie.
        let scale = rng.gen_range(0.1..3.0);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let order = argsort_desc(&z);
        for t in TEMPERATURES {
            let p = softmax_with_temperature(&z, t);
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() >= 1e-9 {
                return Err(format!("vector {v} at T={t} sums to {sum}"));
            }
            if argsort_desc(&p) != order {
                return Err(format!("vector {v} at T={t} changed order"));
            }
        }
    }
    Ok("1000 vectors x 5 temperatures".into())
}

pub fn ranking_model(n: usize, seed: u64) -> SeqModel {
    let v = vocab(n);
    let mut m = init_model(&ArchConfig::stacked(v.encoded_width(), 16, 2, n), &v, seed).unwrap();
    // Wider logits than a fresh init so the top gap varies.
    scale_head(&mut m, 40.0);
    m
}

/// Deployed top-k identical for every temperature.
pub fn handle_rankings() -> Check {
    let mut compared = 0;
    for seed in 0..5 {
        let m = ranking_model(12, seed);
        let pairs = random_pairs(12, 300, seed);
        let base = deploy(&m, 1.0, 4).map_err(|e| e.to_string())?.ranked(&pairs, 12);
        for t in TEMPERATURES {
            let h = deploy(&m, t, 4).map_err(|e| e.to_string())?;
            if h.ranked(&pairs, 12) != base {
                return Err(format!("model {seed} ranks differently at T={t}"));
            }
            compared += pairs.len();
        }
    }
    Ok(format!("{compared} ranked queries"))
}

/// At T=0.01 and precision 4 every input with a top gap of at least 0.1 is reported one-hot.
pub fn one_hot_at_low_temperature() -> Check {
    let (mut checked, mut violations) = (0, 0);
    let mut example = None;
    for seed in 0..5 {
        let m = ranking_model(12, seed);
        let pairs = random_pairs(12, 400, 100 + seed);
        let h = deploy(&m, 0.01, 4).map_err(|e| e.to_string())?;
        let logits = m.logits(&pairs);
        let conf = h.query_batch(&pairs);
        for (z, c) in logits.rows().into_iter().zip(conf.rows()) {
            let o = argsort_desc(z.as_slice().unwrap());
            if z[o[0]] - z[o[1]] < 0.1 {
                continue;
            }
            checked += 1;
            let one_hot = c.iter().enumerate().all(|(i, &v)| v == if i == o[0] { 1.0 } else { 0.0 });
            if !one_hot {
                violations += 1;
                example.get_or_insert_with(|| format!("top {} gap {:.3}", c[o[0]], z[o[0]] - z[o[1]]));
            }
        }
    }
    if checked < 1000 {
        return Err(format!("only {checked} inputs had a clear top gap"));
    }
    match example {
        None => Ok(format!("{checked} clear-gap inputs all one-hot")),
        Some(e) => Err(format!("{violations} of {checked} clear-gap inputs not one-hot, e.g. {e}")),
    }
}

// ---- oracle equivalence ----

pub fn toy_spec() -> CohortSpec {
    CohortSpec {
        n_contributors: 0,
        n_targets: 30,
        vocab: DomainVocab::from_locations(Scale::Building, (0..6).map(|i| format!("b{i}"))),
        weeks: 1,
        global_seed: 5,
        mobility_degree: (3, 6),
        predictability: (0.4, 0.9),
        dwell_minutes: (20.0, 200.0),
        max_gap_minutes: 0,
        ..CohortSpec::desk()
    }
}

/// Time-based enumeration over all locations against continuity-restricted
/// brute force on 20 toy models: same top-1, at most 1/40 of the queries.
pub fn oracle_equivalence() -> Check {
    let spec = toy_spec();
    let vocab = spec.vocab.clone();
    let all: Vec<usize> = (0..vocab.len()).collect();
    let (mut compared, mut worst_ratio) = (0, 0.0f64);
    for seed in 0..20u64 {
        let mut arch = ArchConfig::stacked(vocab.encoded_width(), 8, 2, vocab.len());
        arch.dropout = 0.0;
        let mut model = init_model(&arch, &vocab, seed).unwrap();
        scale_head(&mut model, 5.0);
        let trace = generate_user(&spec.sample_profile(CohortRole::Target, seed as usize), 1, spec.start_date)
            .map_err(|e| e.to_string())?;
        // Days end with an overnight gap; only windows inside one day are continuous.
        let targets: Vec<_> = attack_targets(&trace, &vocab)
            .map_err(|e| e.to_string())?
            .into_iter()
            .filter(|t| t.prev2.end() == t.prev1.entry && t.prev1.end() == t.label_entry)
            .collect();
        if targets.len() < 5 {
            return Err(format!("seed {seed}: only {} continuous windows", targets.len()));
        }
        let priors: Vec<_> = [PriorMode::None, PriorMode::True]
            .iter()
            .map(|&m| build_prior(m, Some(&trace), None, &[], &vocab))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        for kind in [AdversaryKind::A1, AdversaryKind::A2] {
            let adv = AdversaryConfig::new(kind, PriorMode::None);
            let ctx = AttackContext {
                adversary: &adv,
                vocab: &vocab,
                priors: &priors,
                candidates: &all,
                tie_seed: seed,
            };
            for (i, t) in targets.iter().enumerate().step_by(targets.len().div_ceil(5)) {
                let bf = attack_brute_force(&ctx, &model, t, i, BruteForceFilter::Continuity)
                    .map_err(|e| e.to_string())?;
                let tb = attack_time_based(&ctx, &model, t, i).map_err(|e| e.to_string())?;
                for (b, q) in bf.iter().zip(&tb) {
                    if b.rankings[0].top(1) != q.rankings[0].top(1) {
                        return Err(format!("seed {seed} {kind:?} window {i}: top-1 differs"));
                    }
                    worst_ratio = worst_ratio.max(q.queries as f64 / b.queries as f64);
                }
                compared += 1;
            }
        }
    }
    if worst_ratio > 1.0 / 40.0 {
        return Err(format!("time-based used up to {worst_ratio:.4} of the brute-force queries"));
    }
    if compared < 40 {
        return Err(format!("only {compared} windows compared"));
    }
    Ok(format!("{compared} windows on 20 models, query ratio <= 1/{:.0}", 1.0 / worst_ratio))
}
