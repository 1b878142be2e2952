//! Ranked reconstructions and attack accuracy.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AdversaryKind, PriorMode, Strategy};
use crate::error::{Error, Result};
use crate::trace::DomainVocab;

/// Every location once, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedLocations {
    pub locations: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RankedLocations {
    /// Orders locations by score; equal scores fall back to a random key per
    /// location drawn from `rng`.
    pub(crate) fn from_scores<R: Rng>(scores: &[f64], rng: &mut R) -> Self {
        let keys: Vec<u64> = (0..scores.len()).map(|_| rng.gen()).collect();
        let clean = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            clean(scores[b])
                .total_cmp(&clean(scores[a]))
                .then(keys[a].cmp(&keys[b]))
        });
        RankedLocations {
            scores: order.iter().map(|&i| clean(scores[i])).collect(),
            locations: order,
        }
    }

    pub fn top(&self, k: usize) -> &[usize] {
        &self.locations[..k.min(self.locations.len())]
    }
}

/// Outcome for one target window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowAttack {
    pub window: usize,
    /// True location per unknown step.
    pub truth: Vec<usize>,
    /// One ranking per unknown step.
    pub rankings: Vec<RankedLocations>,
    pub queries: u64,
    /// The strategy broke down (e.g. diverged) and the ranking is a random fallback.
    pub failed: bool,
}

impl WindowAttack {
    /// Number of unknown steps whose truth is in the top `k`.
    pub fn hits(&self, k: usize) -> usize {
        self.truth
            .iter()
            .zip(&self.rankings)
            .filter(|(t, r)| r.top(k).contains(t))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub user: String,
    pub adversary: AdversaryKind,
    pub strategy: Strategy,
    pub prior: PriorMode,
    /// Inference temperature of the attacked deployment.
    pub temperature: f64,
    pub tie_seed: u64,
    /// Needed parameter access rather than black-box queries.
    pub white_box: bool,
    pub windows: Vec<WindowAttack>,
    pub runtime_seconds: f64,
}

impl AttackReport {
    pub fn accuracy(&self, k: usize) -> Result<f64> {
        attack_accuracy(&self.windows, k)
    }

    pub fn queries(&self) -> u64 {
        self.windows.iter().map(|w| w.queries).sum()
    }
}

/// Percentage of recovery trials whose true location is ranked in the top `k`.
/// Each unknown step of a window is its own trial.
pub fn attack_accuracy(windows: &[WindowAttack], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::input("k must be at least 1"));
    }
    let trials: usize = windows.iter().map(|w| w.truth.len()).sum();
    if trials == 0 {
        return Err(Error::Undefined("attack accuracy over no windows".into()));
    }
    let hits: usize = windows.iter().map(|w| w.hits(k)).sum();
    Ok(100.0 * hits as f64 / trials as f64)
}

pub const REPORTED_K: [usize; 4] = [1, 2, 3, 5];

/// One row per attacked window.
pub fn write_attack_csv<W: Write>(reports: &[AttackReport], vocab: &DomainVocab, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "user",
        "adversary",
        "strategy",
        "prior",
        "temperature",
        "window",
        "truth",
        "ranked_locations",
        "scores",
        "correct_at_1",
        "correct_at_2",
        "correct_at_3",
        "correct_at_5",
        "queries",
        "failed",
    ])?;
    let name = |i: usize| vocab.location(i).unwrap_or("?").to_string();
    for r in reports {
        for wa in &r.windows {
            let truth: Vec<String> = wa.truth.iter().map(|&t| name(t)).collect();
            let ranked: Vec<String> = wa
                .rankings
                .iter()
                .map(|rk| rk.top(5).iter().map(|&l| name(l)).collect::<Vec<_>>().join(";"))
                .collect();
            let scores: Vec<String> = wa
                .rankings
                .iter()
                .map(|rk| {
                    rk.scores[..5.min(rk.scores.len())]
                        .iter()
                        .map(|s| format!("{s:.6}"))
                        .collect::<Vec<_>>()
                        .join(";")
                })
                .collect();
            let mut row = vec![
                r.user.clone(),
                r.adversary.to_string(),
                r.strategy.to_string(),
                r.prior.to_string(),
                r.temperature.to_string(),
                wa.window.to_string(),
                truth.join("/"),
                ranked.join("/"),
                scores.join("/"),
            ];
            row.extend(REPORTED_K.iter().map(|&k| wa.hits(k).to_string()));
            row.push(wa.queries.to_string());
            row.push(wa.failed.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(truth: usize, order: Vec<usize>) -> WindowAttack {
        WindowAttack {
            window: 0,
            truth: vec![truth],
            rankings: vec![RankedLocations {
                scores: vec![0.0; order.len()],
                locations: order,
            }],
            queries: 0,
            failed: false,
        }
    }

    #[test]
    fn seventy_eight_of_a_hundred() {
        let windows: Vec<_> = (0..100)
            .map(|i| entry(if i < 78 { 2 } else { 4 }, vec![0, 1, 2, 3, 4]))
            .collect();
        assert_eq!(attack_accuracy(&windows, 3).unwrap(), 78.0);
        assert_eq!(attack_accuracy(&windows, 1).unwrap(), 0.0);
        assert_eq!(attack_accuracy(&windows, 5).unwrap(), 100.0);
        assert!(matches!(attack_accuracy(&[], 1), Err(Error::Undefined(_))));
    }

    #[test]
    fn random_ranking_matches_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = 8;
        let windows: Vec<_> = (0..2000)
            .map(|_| {
                let r = RankedLocations::from_scores(&vec![0.0; l], &mut rng);
                entry(rng.gen_range(0..l), r.locations)
            })
            .collect();
        for k in [1, 2, 3, 5] {
            let acc = attack_accuracy(&windows, k).unwrap();
            let expected = 100.0 * k as f64 / l as f64;
            assert!((acc - expected).abs() < 5.0, "k={k}: {acc} vs {expected}");
        }
    }

    #[test]
    fn ranking_sorts_and_keeps_every_location() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = RankedLocations::from_scores(&[-1.0, f64::NEG_INFINITY, 0.5, f64::NAN, -0.2], &mut rng);
        assert_eq!(&r.locations[..3], &[2, 4, 0]);
        assert!(r.scores.windows(2).all(|p| p[0] >= p[1]));
        let mut all = r.locations.clone();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }
}
