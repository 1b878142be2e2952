//! Probe queries and candidate-location pruning.

use log::warn;
use rand::Rng;

use super::ConfidenceOracle;
use crate::error::{Error, Result};
use crate::trace::{
    duration_bin_minutes, EncodedStep, DAYS_PER_WEEK, DURATION_BINS, ENTRY_SLOTS, MINUTES_PER_DAY, SLOT_MINUTES,
};

/// Step that starts where `prev` ends, under the representative-duration rule.
pub(crate) fn following_step(prev: EncodedStep, location: usize, duration_bin: usize) -> EncodedStep {
    let minute = prev.slot as i64 * SLOT_MINUTES + duration_bin_minutes(prev.duration_bin);
    EncodedStep {
        location,
        slot: (minute.rem_euclid(MINUTES_PER_DAY) / SLOT_MINUTES) as usize,
        duration_bin,
        day: (prev.day + minute.div_euclid(MINUTES_PER_DAY) as usize) % DAYS_PER_WEEK,
    }
}

/// `budget` random continuity-consistent input pairs.
///
/// The first step is uniform over location, slot, duration and day; the
/// second has a uniform location and duration and starts when the first ends.
pub fn sample_probes<R: Rng>(n_locations: usize, budget: usize, rng: &mut R) -> Vec<(EncodedStep, EncodedStep)> {
    (0..budget)
        .map(|_| {
            let first = EncodedStep {
                location: rng.gen_range(0..n_locations),
                slot: rng.gen_range(0..ENTRY_SLOTS),
                duration_bin: rng.gen_range(0..DURATION_BINS),
                day: rng.gen_range(0..DAYS_PER_WEEK),
            };
            let second = following_step(first, rng.gen_range(0..n_locations), rng.gen_range(0..DURATION_BINS));
            (first, second)
        })
        .collect()
}

/// Locations reaching `threshold` confidence on at least one probe, by
/// descending best confidence (ties to the lower index).
///
/// When nothing qualifies every location is returned.
pub fn candidate_locations(
    oracle: &dyn ConfidenceOracle,
    probes: &[(EncodedStep, EncodedStep)],
    threshold: f64,
    n_locations: usize,
) -> Result<Vec<usize>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("candidate threshold {threshold} outside (0, 1)")));
    }
    if probes.is_empty() {
        return Err(Error::config("candidate pruning needs at least one probe"));
    }
    let out = oracle.confidences(probes);
    let mut best = vec![f64::NEG_INFINITY; n_locations];
    for row in out.rows() {
        for (b, &v) in best.iter_mut().zip(row.iter()) {
            *b = b.max(v);
        }
    }
    let order = crate::seqnet::argsort_desc(&best);
    let picked: Vec<usize> = order.into_iter().filter(|&i| best[i] >= threshold).collect();
    if picked.is_empty() {
        warn!("no location reached confidence {threshold} on any probe; using the full vocabulary");
        return Ok((0..n_locations).collect());
    }
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probes(n: usize) -> Vec<(EncodedStep, EncodedStep)> {
        sample_probes(10, n, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn one_hot_model_gives_single_candidate() {
        let oracle = |p: &[(EncodedStep, EncodedStep)]| Array2::from_shape_fn((p.len(), 10), |(_, c)| (c == 3) as u8 as f64);
        assert_eq!(candidate_locations(&oracle, &probes(20), 0.01, 10).unwrap(), vec![3]);
    }

    #[test]
    fn uniform_model_keeps_or_falls_back_to_everything() {
        let oracle = |p: &[(EncodedStep, EncodedStep)]| Array2::from_elem((p.len(), 10), 0.1);
        let all: Vec<usize> = (0..10).collect();
        assert_eq!(candidate_locations(&oracle, &probes(5), 0.01, 10).unwrap(), all);
        assert_eq!(candidate_locations(&oracle, &probes(5), 0.5, 10).unwrap(), all);
    }

    #[test]
    fn ordered_by_best_confidence() {
        let oracle = |p: &[(EncodedStep, EncodedStep)]| {
            Array2::from_shape_fn((p.len(), 4), |(r, c)| [[0.6, 0.0, 0.4, 0.0], [0.1, 0.0, 0.0, 0.9]][r % 2][c])
        };
        let p = sample_probes(4, 4, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(candidate_locations(&oracle, &p, 0.01, 4).unwrap(), vec![3, 0, 2]);
    }

    #[test]
    fn probes_are_continuous() {
        for (a, b) in probes(500) {
            let end = a.slot as i64 * 30 + 10 * (a.duration_bin as i64 + 1);
            assert_eq!(b.slot as i64, (end % 1440) / 30);
            assert_eq!(b.day, (a.day + (end / 1440) as usize) % 7);
        }
    }
}
