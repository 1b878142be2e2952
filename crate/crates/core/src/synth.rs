//! Synthetic user cohorts and the session CSV format.
//!
//! Each user follows a first-order Markov chain over their own small set of
//! locations. The chain is modulated by time of day (three periods, each with
//! its own routine successor map) and by a predictability knob: with
//! probability `predictability` the user follows the routine successor, and
//! otherwise samples the next location by propensity. Sessions fill waking
//! hours back to back, so within a day `entry[t+1] = entry[t] + duration[t]`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{DomainVocab, Scale, Session, Trace, DURATION_CAP_MINUTES, MINUTES_PER_DAY};

const DAY_START_MINUTE: i64 = 7 * 60;
const DAY_END_MINUTE: i64 = 23 * 60;
const HOME_PROPENSITY: f64 = 2.0;
/// Hour boundaries of the three routine periods.
const PERIOD_BOUNDS: [i64; 2] = [11 * 60, 17 * 60];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub home: String,
    /// Non-home locations with positive propensity weights.
    pub frequent_set: Vec<(String, f64)>,
    /// 1.0 is a fully deterministic schedule.
    pub predictability: f64,
    pub mobility_degree: usize,
    pub dwell_means: BTreeMap<String, f64>,
    /// Upper bound of the random idle gap inserted between sessions (0 = continuous).
    #[serde(default)]
    pub max_gap_minutes: i64,
    pub seed: u64,
}

impl UserProfile {
    fn locations(&self) -> Vec<(String, f64)> {
        let mut v = vec![(self.home.clone(), HOME_PROPENSITY)];
        v.extend(self.frequent_set.iter().cloned());
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.frequent_set.is_empty() && self.mobility_degree != 1 {
            return Err(Error::config(format!(
                "user {}: empty frequent set",
                self.user_id
            )));
        }
        if self.frequent_set.iter().any(|(_, w)| !(*w > 0.0)) {
            return Err(Error::config("propensity weights must be positive"));
        }
        if self.frequent_set.iter().any(|(l, _)| *l == self.home) {
            return Err(Error::config("frequent set must not repeat the home location"));
        }
        if self.mobility_degree != self.frequent_set.len() + 1 {
            return Err(Error::config(format!(
                "mobility degree {} does not match {} distinct locations",
                self.mobility_degree,
                self.frequent_set.len() + 1
            )));
        }
        if !(0.0..=1.0).contains(&self.predictability) {
            return Err(Error::config("predictability must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Generates `weeks` of sessions starting on `start` (a date at local midnight).
pub fn generate_user(profile: &UserProfile, weeks: u32, start: NaiveDate) -> Result<Trace> {
    if weeks < 1 {
        return Err(Error::config("weeks must be at least 1"));
    }
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let locs = profile.locations();
    let n = locs.len();

    // Routine successor per period: a random cyclic order over the user's locations.
    let routines: Vec<Vec<usize>> = (0..3)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut succ = vec![0; n];
            for i in 0..n {
                succ[order[i]] = order[(i + 1) % n];
            }
            succ
        })
        .collect();

    let dwell: Vec<f64> = locs
        .iter()
        .map(|(l, _)| profile.dwell_means.get(l).copied().unwrap_or(90.0))
        .collect();
    let noise = 1.0 - profile.predictability;
    let day0 = start
        .and_hms_opt(0, 0, 0)
        .expect("midnight is valid")
        .and_utc()
        .timestamp()
        .div_euclid(60);

    let mut sessions = Vec::new();
    for day in 0..(weeks as i64 * 7) {
        let midnight = day0 + day * MINUTES_PER_DAY;
        let wake = DAY_START_MINUTE + (noise * rng.gen_range(0.0..90.0)).round() as i64;
        let mut t = midnight + wake;
        let end_of_day = midnight + DAY_END_MINUTE;
        let mut current = 0usize;
        while t < end_of_day - 5 {
            let jitter = 1.0 + noise * rng.gen_range(-0.6..0.6);
            let mut dur = (dwell[current] * jitter).round() as i64;
            dur = dur.clamp(1, DURATION_CAP_MINUTES).min(end_of_day - t);
            sessions.push(Session::new(locs[current].0.clone(), t, dur)?);
            let gap = if profile.max_gap_minutes > 0 {
                rng.gen_range(0..=profile.max_gap_minutes)
            } else {
                0
            };
            t += dur + gap;
            current = next_location(&mut rng, &locs, &routines, current, t - midnight, profile.predictability);
        }
    }
    Trace::new(profile.user_id.clone(), sessions)
}

fn period_of(minute_of_day: i64) -> usize {
    PERIOD_BOUNDS.iter().filter(|&&b| minute_of_day >= b).count()
}

fn next_location(
    rng: &mut ChaCha8Rng,
    locs: &[(String, f64)],
    routines: &[Vec<usize>],
    current: usize,
    minute_of_day: i64,
    predictability: f64,
) -> usize {
    if locs.len() == 1 {
        return 0;
    }
    // Always draw so the RNG stream does not depend on the branch taken.
    let u: f64 = rng.gen();
    let v: f64 = rng.gen();
    if u < predictability {
        return routines[period_of(minute_of_day)][current];
    }
    let total: f64 = locs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != current)
        .map(|(_, (_, w))| w)
        .sum();
    let mut target = v * total;
    let mut last = current;
    for (i, (_, w)) in locs.iter().enumerate() {
        if i == current {
            continue;
        }
        last = i;
        if target < *w {
            return i;
        }
        target -= w;
    }
    last
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_contributors: usize,
    pub n_targets: usize,
    pub vocab: DomainVocab,
    pub weeks: u32,
    pub global_seed: u64,
    /// Inclusive range of distinct locations per user.
    pub mobility_degree: (usize, usize),
    pub predictability: (f64, f64),
    pub dwell_minutes: (f64, f64),
    #[serde(default)]
    pub max_gap_minutes: i64,
    /// First simulated day (ISO date).
    pub start_date: NaiveDate,
}

impl CohortSpec {
    /// 12 buildings, 40 contributors, 10 targets, 8 weeks.
    pub fn desk() -> Self {
        CohortSpec {
            n_contributors: 40,
            n_targets: 10,
            vocab: DomainVocab::from_locations(
                Scale::Building,
                (0..12).map(|i| format!("bldg-{i:02}")),
            ),
            weeks: 8,
            global_seed: 2019,
            mobility_degree: (3, 6),
            predictability: (0.5, 0.95),
            dwell_minutes: (60.0, 200.0),
            max_gap_minutes: 0,
            start_date: NaiveDate::from_ymd_opt(2019, 9, 2).expect("valid date"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.mobility_degree;
        if lo < 1 || lo > hi {
            return Err(Error::config("mobility degree range must satisfy 1 <= min <= max"));
        }
        if self.vocab.len() < hi {
            return Err(Error::config(format!(
                "vocabulary has {} locations but users may visit up to {hi}",
                self.vocab.len()
            )));
        }
        let (plo, phi) = self.predictability;
        if !(0.0..=1.0).contains(&plo) || !(0.0..=1.0).contains(&phi) || plo > phi {
            return Err(Error::config("predictability range must lie in [0, 1]"));
        }
        if self.dwell_minutes.0 <= 0.0 || self.dwell_minutes.0 > self.dwell_minutes.1 {
            return Err(Error::config("dwell range must be positive and ordered"));
        }
        if self.weeks < 1 {
            return Err(Error::config("weeks must be at least 1"));
        }
        Ok(())
    }

    /// Global building popularity (Zipf over a seeded permutation).
    fn popularity(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.global_seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut ranks: Vec<usize> = (0..self.vocab.len()).collect();
        ranks.shuffle(&mut rng);
        ranks.iter().map(|&r| 1.0 / (r as f64 + 1.0)).collect()
    }

    /// Profile of the `index`-th user of a role. Contributors and targets draw
    /// from disjoint id ranges and seed streams.
    pub fn sample_profile(&self, role: CohortRole, index: usize) -> UserProfile {
        let (prefix, offset) = match role {
            CohortRole::Contributor => ("g", 0),
            CohortRole::Target => ("p", self.n_contributors),
        };
        let seed = self.global_seed.wrapping_add((offset + index) as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d));
        let n_loc = self.vocab.len();
        let degree = rng.gen_range(self.mobility_degree.0..=self.mobility_degree.1);
        let home = rng.gen_range(0..n_loc);

        let popularity = self.popularity();
        let mut pool: Vec<usize> = (0..n_loc).filter(|&i| i != home).collect();
        let mut frequent = Vec::new();
        while frequent.len() + 1 < degree {
            let total: f64 = pool.iter().map(|&i| popularity[i]).sum();
            let mut target = rng.gen_range(0.0..total);
            let mut pick = pool.len() - 1;
            for (k, &i) in pool.iter().enumerate() {
                if target < popularity[i] {
                    pick = k;
                    break;
                }
                target -= popularity[i];
            }
            let loc = pool.remove(pick);
            frequent.push(loc);
        }

        let name = |i: usize| self.vocab.locations()[i].clone();
        let frequent_set: Vec<(String, f64)> = frequent
            .iter()
            .map(|&i| (name(i), rng.gen_range(0.5..2.0)))
            .collect();
        let mut dwell_means = BTreeMap::new();
        for &i in std::iter::once(&home).chain(frequent.iter()) {
            dwell_means.insert(
                name(i),
                rng.gen_range(self.dwell_minutes.0..=self.dwell_minutes.1),
            );
        }
        let predictability = if self.predictability.0 == self.predictability.1 {
            self.predictability.0
        } else {
            rng.gen_range(self.predictability.0..=self.predictability.1)
        };
        UserProfile {
            user_id: format!("{prefix}{index:03}"),
            home: name(home),
            frequent_set,
            predictability,
            mobility_degree: degree,
            dwell_means,
            max_gap_minutes: self.max_gap_minutes,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CohortRole {
    Contributor,
    Target,
}

/// Contributor and target traces in user-index order.
pub fn generate_cohort(spec: &CohortSpec) -> Result<(Vec<Trace>, Vec<Trace>)> {
    use rayon::prelude::*;
    spec.validate()?;
    let run = |role, n| -> Result<Vec<Trace>> {
        (0..n)
            .into_par_iter()
            .map(|i| generate_user(&spec.sample_profile(role, i), spec.weeks, spec.start_date))
            .collect()
    };
    Ok((
        run(CohortRole::Contributor, spec.n_contributors)?,
        run(CohortRole::Target, spec.n_targets)?,
    ))
}

/// Temporal split: the first `ceil(fraction * n)` sessions train.
pub fn split_train_test(trace: &Trace, train_fraction: f64) -> Result<(Trace, Trace)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::input(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let n = trace.sessions.len();
    let n_train = ((train_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let n_train = n_train.min(n);
    if n_train < 3 || n - n_train < 3 {
        return Err(Error::Split(format!(
            "user {}: {n} sessions split {n_train}/{} leaves a side without a window",
            trace.user_id,
            n - n_train
        )));
    }
    let (a, b) = trace.sessions.split_at(n_train);
    Ok((
        Trace {
            user_id: trace.user_id.clone(),
            sessions: a.to_vec(),
        },
        Trace {
            user_id: trace.user_id.clone(),
            sessions: b.to_vec(),
        },
    ))
}

const CSV_HEADER: [&str; 4] = ["user_id", "entry_iso8601", "duration_min", "location_id"];
const ISO_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

fn minutes_to_iso(entry: i64) -> String {
    let dt = chrono::DateTime::from_timestamp(entry * 60, 0)
        .expect("entry within chrono range")
        .naive_utc();
    dt.format(ISO_FORMAT).to_string()
}

fn iso_to_minutes(s: &str) -> std::result::Result<i64, String> {
    let s = s.trim().trim_end_matches('Z');
    let dt = NaiveDateTime::parse_from_str(s, ISO_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .map_err(|e| format!("bad entry timestamp `{s}`: {e}"))?;
    Ok(dt.and_utc().timestamp().div_euclid(60))
}

pub fn write_csv<W: Write>(traces: &[Trace], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for t in traces {
        for s in &t.sessions {
            w.write_record([
                t.user_id.as_str(),
                &minutes_to_iso(s.entry),
                &s.duration.to_string(),
                s.location.as_str(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(traces: &[Trace], path: &Path) -> Result<()> {
    write_csv(traces, File::create(path)?)
}

/// Reads the session CSV; one trace per user id, sessions sorted by entry.
pub fn ingest_csv(path: &Path) -> Result<Vec<Trace>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().map(str::trim).ne(CSV_HEADER) {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: 1,
            message: format!("expected header `{}`", CSV_HEADER.join(",")),
        });
    }
    let mut users: BTreeMap<String, Vec<Session>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line,
            message,
        };
        if rec.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, found {}", rec.len())));
        }
        let entry = iso_to_minutes(&rec[1]).map_err(parse_err)?;
        let duration: i64 = rec[2]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("bad duration `{}`: {e}", &rec[2])))?;
        let session = Session::new(rec[3].trim(), entry, duration)
            .map_err(|e| parse_err(e.to_string()))?;
        users.entry(rec[0].trim().to_owned()).or_default().push(session);
    }
    users
        .into_iter()
        .map(|(user, mut sessions)| {
            sessions.sort_by_key(|s| s.entry);
            Trace::new(user, sessions)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn profile(pred: f64, locs: &[&str]) -> UserProfile {
        let mut dwell = BTreeMap::new();
        for (i, l) in locs.iter().enumerate() {
            dwell.insert(l.to_string(), 70.0 + 25.0 * i as f64);
        }
        UserProfile {
            user_id: "u".into(),
            home: locs[0].into(),
            frequent_set: locs[1..].iter().map(|l| (l.to_string(), 1.0)).collect(),
            predictability: pred,
            mobility_degree: locs.len(),
            dwell_means: dwell,
            max_gap_minutes: 0,
            seed: 7,
        }
    }

    fn start() -> NaiveDate {
        NaiveDate::from_ymd_opt(2019, 9, 2).unwrap()
    }

    fn daily_locations(t: &Trace) -> BTreeMap<i64, Vec<String>> {
        let mut days: BTreeMap<i64, Vec<String>> = BTreeMap::new();
        for s in &t.sessions {
            days.entry(s.entry.div_euclid(MINUTES_PER_DAY))
                .or_default()
                .push(s.location.clone());
        }
        days
    }

    #[test]
    fn deterministic_schedule_repeats_daily() {
        let t = generate_user(&profile(1.0, &["H", "A", "B"]), 2, start()).unwrap();
        let days = daily_locations(&t);
        let first = days.values().next().unwrap().clone();
        assert!(first.len() > 3);
        assert!(days.values().all(|d| *d == first));
    }

    #[test]
    fn single_location_user_stays_home() {
        let mut p = profile(0.5, &["H"]);
        p.mobility_degree = 1;
        let t = generate_user(&p, 1, start()).unwrap();
        assert!(!t.is_empty());
        assert!(t.sessions.iter().all(|s| s.location == "H"));
    }

    #[test]
    fn empty_frequent_set_rejected() {
        let mut p = profile(0.5, &["H"]);
        p.mobility_degree = 3;
        assert!(matches!(generate_user(&p, 1, start()), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_trace() {
        let p = profile(0.6, &["H", "A", "B", "C"]);
        let a = generate_user(&p, 2, start()).unwrap();
        let b = generate_user(&p, 2, start()).unwrap();
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        write_csv(&[a], &mut ca).unwrap();
        write_csv(&[b], &mut cb).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn continuity_within_day() {
        let t = generate_user(&profile(0.4, &["H", "A", "B", "C"]), 1, start()).unwrap();
        for w in t.sessions.windows(2) {
            let same_day = w[0].entry.div_euclid(MINUTES_PER_DAY) == w[1].entry.div_euclid(MINUTES_PER_DAY);
            if same_day {
                assert_eq!(w[1].entry, w[0].end());
            }
        }
    }

    #[test]
    fn cohort_ids_disjoint_and_deterministic() {
        let mut spec = CohortSpec::desk();
        spec.weeks = 1;
        let (g, p) = generate_cohort(&spec).unwrap();
        assert_eq!(g.len() + p.len(), 50);
        let gi: std::collections::BTreeSet<_> = g.iter().map(|t| &t.user_id).collect();
        assert!(p.iter().all(|t| !gi.contains(&t.user_id)));
        for t in g.iter().chain(&p) {
            assert!(t.sessions.iter().all(|s| spec.vocab.contains(&s.location)));
        }
        let (g2, p2) = generate_cohort(&spec).unwrap();
        assert_eq!(g, g2);
        assert_eq!(p, p2);
    }

    #[test]
    fn cohort_rejects_small_vocab() {
        let mut spec = CohortSpec::desk();
        spec.vocab = DomainVocab::from_locations(Scale::Building, ["a", "b"]);
        assert!(matches!(generate_cohort(&spec), Err(Error::Config(_))));
    }

    fn trace_len(n: usize) -> Trace {
        let sessions = (0..n)
            .map(|i| Session::new("A", 1000 + 20 * i as i64, 10).unwrap())
            .collect();
        Trace::new("u", sessions).unwrap()
    }

    #[test]
    fn temporal_split() {
        let (a, b) = split_train_test(&trace_len(100), 0.8).unwrap();
        assert_eq!((a.len(), b.len()), (80, 20));
        assert!(a.sessions.last().unwrap().entry < b.sessions[0].entry);
        let (a, b) = split_train_test(&trace_len(10), 0.5).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        assert!(matches!(split_train_test(&trace_len(3), 0.9), Err(Error::Split(_))));
        assert!(split_train_test(&trace_len(10), 1.0).is_err());
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ingest_groups_and_sorts() {
        let f = write_tmp(
            "user_id,entry_iso8601,duration_min,location_id\n\
             u2,2019-09-02T09:00:00,30,B\n\
             u1,2019-09-02T10:00:00,30,A\n\
             u1,2019-09-02T08:00:00,30,C\n\
             u2,2019-09-02T10:00:00,30,A\n\
             u1,2019-09-02T09:00:00,30,B\n\
             u2,2019-09-02T11:00:00,30,C\n",
        );
        let traces = ingest_csv(f.path()).unwrap();
        assert_eq!(traces.len(), 2);
        assert!(traces.iter().all(|t| t.len() == 3));
        let u1: Vec<_> = traces[0].sessions.iter().map(|s| s.location.as_str()).collect();
        assert_eq!(u1, ["C", "B", "A"]);
        assert_eq!(traces[0].sessions[0].day_of_week, 0);
    }

    #[test]
    fn ingest_errors() {
        let f = write_tmp(
            "user_id,entry_iso8601,duration_min,location_id\n\
             u1,2019-09-02T10:00:00,30,A\n\
             u1,2019-09-02T11:00:00,0,A\n",
        );
        match ingest_csv(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = write_tmp(
            "user_id,entry_iso8601,duration_min,location_id\n\
             u1,2019-09-02T10:00:00,90,A\n\
             u1,2019-09-02T11:00:00,30,B\n",
        );
        assert!(matches!(ingest_csv(f.path()), Err(Error::Validation(_))));
        let f = write_tmp("user_id,entry_iso8601,duration_min,location_id\nu1,yesterday,5,A\n");
        assert!(matches!(ingest_csv(f.path()), Err(Error::Parse { line: 2, .. })));
    }

    /// Fraction of (slot, location) observations matching that slot's modal location.
    fn repeat_rate(t: &Trace) -> f64 {
        let mut counts: BTreeMap<usize, BTreeMap<&str, usize>> = BTreeMap::new();
        for s in &t.sessions {
            *counts.entry(s.slot()).or_default().entry(&s.location).or_default() += 1;
        }
        let modal: usize = counts.values().map(|m| m.values().max().unwrap()).sum();
        modal as f64 / t.len() as f64
    }

    #[test]
    fn predictability_raises_repeat_rate() {
        let rates: Vec<f64> = [0.2, 0.6, 1.0]
            .iter()
            .map(|&p| repeat_rate(&generate_user(&profile(p, &["H", "A", "B", "C", "D"]), 4, start()).unwrap()))
            .collect();
        assert!(rates[0] <= rates[1] && rates[1] <= rates[2], "{rates:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn generated_traces_are_valid(seed in any::<u64>(), pred in 0.0f64..=1.0, degree in 1usize..6) {
            let mut spec = CohortSpec::desk();
            spec.weeks = 1;
            spec.global_seed = seed;
            spec.mobility_degree = (degree, degree);
            spec.predictability = (pred, pred);
            let p = spec.sample_profile(CohortRole::Target, 0);
            let t = generate_user(&p, 1, spec.start_date).unwrap();
            prop_assert!(t.validate().is_ok());
            prop_assert!(t.sessions.iter().all(|s| s.duration > 0 && s.duration <= 240));
            prop_assert!(t.distinct_locations().len() <= degree);
        }

        #[test]
        fn csv_round_trip(seed in any::<u64>()) {
            let mut spec = CohortSpec::desk();
            spec.weeks = 1;
            spec.global_seed = seed;
            let traces: Vec<Trace> = (0..3)
                .map(|i| generate_user(&spec.sample_profile(CohortRole::Contributor, i), 1, spec.start_date).unwrap())
                .collect();
            let f = tempfile::NamedTempFile::new().unwrap();
            write_csv_file(&traces, f.path()).unwrap();
            prop_assert_eq!(ingest_csv(f.path()).unwrap(), traces);
        }
    }
}
