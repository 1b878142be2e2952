//! The attack grid against one deployed personal model.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blackbox::{deploy, BlackBoxHandle};
use super::config::{AttackSettings, Seeds};
use super::phases::{measured, top123, user_seed, TopK, UserData};
use crate::error::Result;
use crate::inversion::{
    attack_brute_force, attack_gradient, attack_targets, attack_time_based, build_prior, candidate_locations,
    sample_probes, AdversaryConfig, AdversaryKind, AttackContext, AttackReport, AttackTarget, BruteForceFilter,
    ConfidenceOracle, Prior, PriorMode, Strategy, WhiteBox, WindowAttack,
};
use crate::seqnet::SeqModel;
use crate::trace::{DomainVocab, EncodedStep};

/// One (user, adversary, strategy, prior, temperature) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub user: String,
    pub adversary: AdversaryKind,
    pub strategy: Strategy,
    pub prior: PriorMode,
    pub temperature: f64,
    pub white_box: bool,
    pub trials: usize,
    /// Hits at each configured k, in configuration order.
    pub hits: Vec<usize>,
    pub queries: u64,
    pub failed_windows: usize,
    /// Wall clock of the strategy run split evenly over the priors it scored.
    pub runtime_seconds: f64,
}

impl AttackRow {
    fn from_report(r: &AttackReport, k_values: &[usize]) -> Self {
        AttackRow {
            user: r.user.clone(),
            adversary: r.adversary,
            strategy: r.strategy,
            prior: r.prior,
            temperature: r.temperature,
            white_box: r.white_box,
            trials: r.windows.iter().map(|w| w.truth.len()).sum(),
            hits: k_values.iter().map(|&k| r.windows.iter().map(|w| w.hits(k)).sum()).collect(),
            queries: r.queries(),
            failed_windows: r.windows.iter().filter(|w| w.failed).count(),
            runtime_seconds: r.runtime_seconds,
        }
    }

    /// Percent accuracy at the `i`-th configured k.
    pub fn accuracy(&self, i: usize) -> f64 {
        100.0 * self.hits[i] as f64 / self.trials as f64
    }
}

/// What the service delivers to the user at one temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRow {
    pub user: String,
    pub temperature: f64,
    /// Top-1/2/3 accuracy on the user's test windows through the handle.
    pub accuracy: TopK,
    /// Candidate locations the adversary derived from probing.
    pub candidates: usize,
}

/// Share of time-based candidate scores that rounded to exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseRow {
    pub user: String,
    pub temperature: f64,
    pub adversary: AdversaryKind,
    /// One fraction per attacked window.
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct UserAttack {
    pub reports: Vec<AttackReport>,
    pub rows: Vec<AttackRow>,
    pub service: Vec<ServiceRow>,
    pub collapse: Vec<CollapseRow>,
}

/// Counts how many label confidences it passed on were rounded to an extreme.
struct Tally<'a> {
    inner: &'a BlackBoxHandle,
    label: usize,
    extreme: AtomicU64,
    total: AtomicU64,
}

impl ConfidenceOracle for Tally<'_> {
    fn confidences(&self, pairs: &[(EncodedStep, EncodedStep)]) -> Array2<f64> {
        let c = self.inner.confidences(pairs);
        let col = c.column(self.label);
        let extreme = col.iter().filter(|&&v| v == 0.0 || v == 1.0).count();
        self.extreme.fetch_add(extreme as u64, Ordering::Relaxed);
        self.total.fetch_add(col.len() as u64, Ordering::Relaxed);
        c
    }
}

/// The tail `fraction` of the user's training triples, at most `cap` of them,
/// with their indices.
pub fn select_targets(
    user: &UserData,
    vocab: &DomainVocab,
    fraction: f64,
    cap: Option<usize>,
) -> Result<Vec<(usize, AttackTarget)>> {
    let all = attack_targets(&user.train, vocab)?;
    let mut n = (all.len() as f64 * fraction).ceil() as usize;
    if let Some(c) = cap {
        n = n.min(c);
    }
    let start = all.len() - n.min(all.len());
    Ok(all.into_iter().enumerate().skip(start).collect())
}

/// What one user's attack grid needs besides the model.
pub struct GridSpec<'a> {
    pub settings: &'a AttackSettings,
    pub adversaries: &'a [AdversaryKind],
    pub strategies: &'a [Strategy],
    /// Strategies run at temperatures other than 1.
    pub sweep_strategies: &'a [Strategy],
    pub priors: &'a [PriorMode],
    pub temperatures: &'a [f64],
    pub seeds: &'a Seeds,
    /// Measures score collapse on the time-based runs.
    pub collapse: bool,
}

/// Deploys `model` at each temperature and runs every attack cell against it.
///
/// Probes, and therefore candidates and estimated priors, are drawn from one
/// per-user stream so every temperature sees the same probe set.
pub fn attack_user(
    spec: &GridSpec,
    vocab: &DomainVocab,
    user: &UserData,
    user_index: usize,
    model: &SeqModel,
) -> Result<UserAttack> {
    let s = spec.settings;
    let n_loc = vocab.len();
    let targets = select_targets(user, vocab, s.window_fraction, s.max_windows_per_user)?;
    let tie_seed = user_seed(spec.seeds.ties, user_index);
    let mut out = UserAttack::default();
    for &temperature in spec.temperatures {
        let handle = deploy(model, temperature, s.precision)?;
        let mut rng = ChaCha8Rng::seed_from_u64(user_seed(spec.seeds.probes, user_index));
        let probes = sample_probes(n_loc, s.probe_budget.max(1), &mut rng);
        let candidates = candidate_locations(&handle, &probes, s.candidate_threshold, n_loc)?;
        let priors: Vec<Prior> = spec
            .priors
            .iter()
            .map(|&m| build_prior(m, Some(&user.train), Some(&handle), &probes, vocab))
            .collect::<Result<_>>()?;
        out.service.push(ServiceRow {
            user: user.user_id.clone(),
            temperature,
            accuracy: top123(&handle, &user.test_windows)?,
            candidates: candidates.len(),
        });

        for &kind in spec.adversaries {
            let adversary = AdversaryConfig {
                kind,
                prior_mode: spec.priors.first().copied().unwrap_or(PriorMode::None),
                candidate_threshold: s.candidate_threshold,
                probe_budget: s.probe_budget,
                max_enumeration: s.max_enumeration,
            };
            adversary.validate()?;
            let ctx = AttackContext {
                adversary: &adversary,
                vocab,
                priors: &priors,
                candidates: &candidates,
                tie_seed,
            };
            for &strategy in spec.strategies {
                if temperature != 1.0 && !spec.sweep_strategies.contains(&strategy) {
                    continue;
                }
                let mut fractions = Vec::new();
                let (per_window, cost) = measured(|| -> Result<Vec<Vec<WindowAttack>>> {
                    targets
                        .iter()
                        .map(|(i, t)| match strategy {
                            Strategy::BruteForce => attack_brute_force(&ctx, &handle, t, *i, BruteForceFilter::None),
                            Strategy::TimeBased if spec.collapse => {
                                let tally = Tally {
                                    inner: &handle,
                                    label: t.label,
                                    extreme: AtomicU64::new(0),
                                    total: AtomicU64::new(0),
                                };
                                let r = attack_time_based(&ctx, &tally, t, *i)?;
                                let total = tally.total.load(Ordering::Relaxed).max(1);
                                fractions.push(tally.extreme.load(Ordering::Relaxed) as f64 / total as f64);
                                Ok(r)
                            }
                            Strategy::TimeBased => attack_time_based(&ctx, &handle, t, *i),
                            Strategy::Gradient => {
                                let wb = WhiteBox { model, temperature };
                                attack_gradient(&ctx, &wb, t, *i, &s.gradient)
                            }
                        })
                        .collect()
                });
                let per_window = per_window?;
                log::info!(
                    "{} T={temperature} {kind:?} {}: {} windows in {:.1}s",
                    user.user_id,
                    strategy.name(),
                    targets.len(),
                    cost.wall_seconds
                );
                if !fractions.is_empty() {
                    out.collapse.push(CollapseRow {
                        user: user.user_id.clone(),
                        temperature,
                        adversary: kind,
                        fractions,
                    });
                }
                for (j, &prior) in spec.priors.iter().enumerate() {
                    let report = AttackReport {
                        user: user.user_id.clone(),
                        adversary: kind,
                        strategy,
                        prior,
                        temperature,
                        tie_seed,
                        white_box: strategy == Strategy::Gradient,
                        windows: per_window.iter().map(|w| w[j].clone()).collect(),
                        runtime_seconds: cost.wall_seconds / spec.priors.len() as f64,
                    };
                    out.rows.push(AttackRow::from_report(&report, &s.k_values));
                    out.reports.push(report);
                }
            }
        }
    }
    Ok(out)
}
