//! Enumeration attacks: exhaustive search and continuity-derived search.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::probes::following_step;
use super::report::{RankedLocations, WindowAttack};
use super::{AdversaryKind, AttackContext, AttackTarget, ConfidenceOracle, Strategy};
use crate::error::{Error, Result};
use crate::trace::{
    day_of_week, duration_bin_minutes, minute_of_day, EncodedStep, DAYS_PER_WEEK, DURATION_BINS, ENTRY_SLOTS,
    SLOT_MINUTES,
};

const CHUNK: usize = 4096;

/// Restricts which brute-force candidates are scored. Every candidate is
/// still queried.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BruteForceFilter {
    None,
    /// Only candidates whose times agree with back-to-back sessions.
    Continuity,
}

/// Number of candidate inputs one window costs.
pub fn enumeration_size(kind: AdversaryKind, strategy: Strategy, n_locations: usize, n_candidates: usize) -> u64 {
    let (full, slots, bins) = (n_locations as u64, ENTRY_SLOTS as u64, DURATION_BINS as u64);
    let cand = n_candidates as u64;
    match (strategy, kind) {
        (Strategy::BruteForce, AdversaryKind::A3) => (full * slots * bins).pow(2),
        (Strategy::BruteForce, _) => full * slots * bins,
        (Strategy::TimeBased, AdversaryKind::A3) => cand * slots * bins * cand * bins,
        (Strategy::TimeBased, _) => cand * bins,
        (Strategy::Gradient, _) => 0,
    }
}

fn step_at(location: usize, minute: i64, duration_bin: usize) -> EncodedStep {
    EncodedStep {
        location,
        slot: (minute_of_day(minute) / SLOT_MINUTES) as usize,
        duration_bin,
        day: day_of_week(minute) as usize,
    }
}

struct Known {
    prev2: EncodedStep,
    prev1: EncodedStep,
    obs_day: usize,
}

fn known_steps(ctx: &AttackContext, target: &AttackTarget) -> Result<Known> {
    Ok(Known {
        prev2: ctx.vocab.encode_session(&target.prev2)?,
        prev1: ctx.vocab.encode_session(&target.prev1)?,
        obs_day: day_of_week(target.label_entry) as usize,
    })
}

/// Scores a stream of `(pair, counted)` candidates: every pair is queried,
/// only counted ones enter the per-location maxima.
fn score_stream<I>(
    ctx: &AttackContext,
    oracle: &dyn ConfidenceOracle,
    target: &AttackTarget,
    window: usize,
    candidates: I,
) -> Result<Vec<WindowAttack>>
where
    I: Iterator<Item = ((EncodedStep, EncodedStep), bool)>,
{
    let kind = ctx.adversary.kind;
    let steps = kind.unknown_steps();
    let n_loc = ctx.vocab.len();
    let truth = target.truth(kind, ctx.vocab)?;
    let ln_priors: Vec<Vec<f64>> = ctx
        .priors
        .iter()
        .map(|p| (0..n_loc).map(|i| p.ln(i)).collect())
        .collect();
    let mut best = vec![vec![vec![f64::NEG_INFINITY; n_loc]; steps.len()]; ctx.priors.len()];
    let mut queries = 0u64;
    let mut pairs = Vec::with_capacity(CHUNK);
    let mut counted = Vec::with_capacity(CHUNK);
    let mut flush = |pairs: &mut Vec<(EncodedStep, EncodedStep)>, counted: &mut Vec<bool>| {
        if pairs.is_empty() {
            return;
        }
        let conf = oracle.confidences(pairs);
        queries += pairs.len() as u64;
        for (r, (pair, &keep)) in pairs.iter().zip(counted.iter()).enumerate() {
            if !keep {
                continue;
            }
            let ln_conf = conf[[r, target.label]].ln();
            let locs: Vec<usize> = steps.iter().map(|&s| if s == 0 { pair.0.location } else { pair.1.location }).collect();
            for (j, lp) in ln_priors.iter().enumerate() {
                let score = ln_conf + locs.iter().map(|&l| lp[l]).sum::<f64>();
                for (si, &l) in locs.iter().enumerate() {
                    let slot = &mut best[j][si][l];
                    if score > *slot {
                        *slot = score;
                    }
                }
            }
        }
        pairs.clear();
        counted.clear();
    };
    for (pair, keep) in candidates {
        pairs.push(pair);
        counted.push(keep);
        if pairs.len() == CHUNK {
            flush(&mut pairs, &mut counted);
        }
    }
    flush(&mut pairs, &mut counted);

    Ok(best
        .into_iter()
        .map(|per_step| WindowAttack {
            window,
            truth: truth.clone(),
            rankings: per_step
                .iter()
                .enumerate()
                .map(|(si, scores)| RankedLocations::from_scores(scores, &mut tie_rng(ctx.tie_seed, window, si)))
                .collect(),
            queries,
            failed: false,
        })
        .collect())
}

/// Tie-breaking stream for one unknown step of one window; shared across
/// strategies and priors so they break ties identically.
pub(crate) fn tie_rng(seed: u64, window: usize, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ (window as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (step as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f),
    )
}

fn check_budget(ctx: &AttackContext, size: u64) -> Result<()> {
    if size > ctx.adversary.max_enumeration {
        return Err(Error::Attack(format!(
            "{} candidate inputs per window exceed the enumeration limit of {}",
            size, ctx.adversary.max_enumeration
        )));
    }
    Ok(())
}

fn all_steps(n_loc: usize) -> impl Iterator<Item = (usize, usize, usize)> + Clone {
    (0..n_loc).flat_map(|l| (0..ENTRY_SLOTS).flat_map(move |s| (0..DURATION_BINS).map(move |b| (l, s, b))))
}

/// Scores every `(location, slot, duration bin)` for each unknown step.
///
/// Days are never enumerated: an unknown step next to a known one takes the
/// known day, moved by one when the slot order implies crossing midnight;
/// with both steps unknown they take the day `l_t` was observed.
pub fn attack_brute_force(
    ctx: &AttackContext,
    oracle: &dyn ConfidenceOracle,
    target: &AttackTarget,
    window: usize,
    filter: BruteForceFilter,
) -> Result<Vec<WindowAttack>> {
    let kind = ctx.adversary.kind;
    let n_loc = ctx.vocab.len();
    check_budget(ctx, enumeration_size(kind, Strategy::BruteForce, n_loc, n_loc))?;
    let k = known_steps(ctx, target)?;
    let restrict = filter == BruteForceFilter::Continuity;
    match kind {
        AdversaryKind::A1 => {
            let derived = step_at(0, target.prev2.end(), 0);
            let it = all_steps(n_loc).map(|(l, s, b)| {
                let day = if s >= k.prev2.slot { k.prev2.day } else { (k.prev2.day + 1) % DAYS_PER_WEEK };
                let x1 = EncodedStep { location: l, slot: s, duration_bin: b, day };
                let ok = !restrict || (s == derived.slot && day == derived.day);
                ((k.prev2, x1), ok)
            });
            score_stream(ctx, oracle, target, window, it)
        }
        AdversaryKind::A2 => {
            let it = all_steps(n_loc).map(|(l, s, b)| {
                let day = if s <= k.prev1.slot { k.prev1.day } else { (k.prev1.day + DAYS_PER_WEEK - 1) % DAYS_PER_WEEK };
                let x2 = EncodedStep { location: l, slot: s, duration_bin: b, day };
                let ok = !restrict || {
                    let d = step_at(l, target.prev1.entry - duration_bin_minutes(b), b);
                    s == d.slot && day == d.day
                };
                ((x2, k.prev1), ok)
            });
            score_stream(ctx, oracle, target, window, it)
        }
        AdversaryKind::A3 => {
            let day = k.obs_day;
            let it = all_steps(n_loc).flat_map(move |(l2, s2, b2)| {
                let x2 = EncodedStep { location: l2, slot: s2, duration_bin: b2, day };
                let next_slot = following_step(x2, 0, 0).slot;
                all_steps(n_loc).map(move |(l1, s1, b1)| {
                    let x1 = EncodedStep { location: l1, slot: s1, duration_bin: b1, day };
                    ((x2, x1), !restrict || s1 == next_slot)
                })
            });
            score_stream(ctx, oracle, target, window, it)
        }
    }
}

/// Enumerates locations from `ctx.candidates` and duration bins only, deriving
/// the unknown entry time from the neighbouring step under continuity.
///
/// A1 starts `x_{t-1}` when `x_{t-2}` ends; A2 starts `x_{t-2}` one
/// representative duration before `x_{t-1}`; A3 enumerates the slot of
/// `x_{t-2}` and derives the slot of `x_{t-1}` from it.
pub fn attack_time_based(
    ctx: &AttackContext,
    oracle: &dyn ConfidenceOracle,
    target: &AttackTarget,
    window: usize,
) -> Result<Vec<WindowAttack>> {
    let kind = ctx.adversary.kind;
    let cand = ctx.candidates;
    if cand.is_empty() {
        return Err(Error::Attack("empty candidate set".into()));
    }
    check_budget(ctx, enumeration_size(kind, Strategy::TimeBased, ctx.vocab.len(), cand.len()))?;
    let k = known_steps(ctx, target)?;
    match kind {
        AdversaryKind::A1 => {
            let end = target.prev2.end();
            let it = cand
                .iter()
                .flat_map(|&l| (0..DURATION_BINS).map(move |b| ((k.prev2, step_at(l, end, b)), true)));
            score_stream(ctx, oracle, target, window, it)
        }
        AdversaryKind::A2 => {
            let entry = target.prev1.entry;
            let it = cand.iter().flat_map(|&l| {
                (0..DURATION_BINS).map(move |b| ((step_at(l, entry - duration_bin_minutes(b), b), k.prev1), true))
            });
            score_stream(ctx, oracle, target, window, it)
        }
        AdversaryKind::A3 => {
            let day = k.obs_day;
            let it = cand.iter().flat_map(move |&l2| {
                (0..ENTRY_SLOTS).flat_map(move |s2| {
                    (0..DURATION_BINS).flat_map(move |b2| {
                        let x2 = EncodedStep { location: l2, slot: s2, duration_bin: b2, day };
                        cand.iter().flat_map(move |&l1| {
                            (0..DURATION_BINS).map(move |b1| {
                                let x1 = EncodedStep { day, ..following_step(x2, l1, b1) };
                                ((x2, x1), true)
                            })
                        })
                    })
                })
            });
            score_stream(ctx, oracle, target, window, it)
        }
    }
}
