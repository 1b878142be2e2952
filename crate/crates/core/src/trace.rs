//! Mobility traces, feature discretization and location vocabularies.
//!
//! A [`Session`] is one stay at one location. Entry times live on an absolute
//! minute timeline (minutes since 1970-01-01T00:00) so that continuity
//! arithmetic across midnight stays exact; slot and day indices are derived.
//!
//! Each session is encoded as four concatenated one-hot blocks:
//!
//! ```text
//! [ location (|L|) | entry slot (48) | duration bin (24) | day of week (7) ]
//! ```

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MINUTES_PER_DAY: i64 = 1440;
pub const SLOT_MINUTES: i64 = 30;
pub const ENTRY_SLOTS: usize = 48;
pub const DURATION_BIN_MINUTES: i64 = 10;
pub const DURATION_BINS: usize = 24;
pub const DURATION_CAP_MINUTES: i64 = 240;
pub const DAYS_PER_WEEK: usize = 7;

/// Width of the non-location part of an encoded session.
pub const TIME_FEATURE_WIDTH: usize = ENTRY_SLOTS + DURATION_BINS + DAYS_PER_WEEK;

/// Maps a minute within the day to its 30-minute slot.
pub fn discretize_entry(minute_of_day: i64) -> Result<usize> {
    if !(0..MINUTES_PER_DAY).contains(&minute_of_day) {
        return Err(Error::input(format!(
            "entry minute {minute_of_day} outside [0, 1440)"
        )));
    }
    Ok((minute_of_day / SLOT_MINUTES) as usize)
}

/// Maps a duration to its 10-minute bin; bin `i` covers `(10i, 10(i+1)]` and
/// every duration above four hours lands in the last bin.
pub fn discretize_duration(duration: i64) -> Result<usize> {
    if duration <= 0 {
        return Err(Error::input(format!("duration {duration} must be positive")));
    }
    let bin = (duration + DURATION_BIN_MINUTES - 1) / DURATION_BIN_MINUTES - 1;
    Ok(bin.min(DURATION_BINS as i64 - 1) as usize)
}

/// Representative duration of a bin: its upper edge.
pub fn duration_bin_minutes(bin: usize) -> i64 {
    (bin as i64 + 1) * DURATION_BIN_MINUTES
}

/// Day of week (Monday = 0) of an absolute minute.
pub fn day_of_week(entry: i64) -> u8 {
    // 1970-01-01 was a Thursday.
    ((entry.div_euclid(MINUTES_PER_DAY) + 3).rem_euclid(7)) as u8
}

pub fn minute_of_day(entry: i64) -> i64 {
    entry.rem_euclid(MINUTES_PER_DAY)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Session {
    pub location: String,
    /// Minutes since 1970-01-01T00:00.
    pub entry: i64,
    pub duration: i64,
    pub day_of_week: u8,
}

impl Session {
    pub fn new(location: impl Into<String>, entry: i64, duration: i64) -> Result<Self> {
        if duration <= 0 {
            return Err(Error::Validation(format!(
                "session duration must be positive, got {duration}"
            )));
        }
        Ok(Session {
            location: location.into(),
            entry,
            duration,
            day_of_week: day_of_week(entry),
        })
    }

    pub fn end(&self) -> i64 {
        self.entry + self.duration
    }

    pub fn slot(&self) -> usize {
        (minute_of_day(self.entry) / SLOT_MINUTES) as usize
    }

    pub fn duration_bin(&self) -> usize {
        discretize_duration(self.duration).expect("validated at construction")
    }

    pub fn validate(&self) -> Result<()> {
        if self.duration <= 0 {
            return Err(Error::Validation(format!(
                "session at {} has non-positive duration {}",
                self.entry, self.duration
            )));
        }
        if self.day_of_week != day_of_week(self.entry) {
            return Err(Error::Validation(format!(
                "session at {} has day_of_week {} but its entry falls on day {}",
                self.entry,
                self.day_of_week,
                day_of_week(self.entry)
            )));
        }
        Ok(())
    }
}

/// One user's chronologically ordered, non-overlapping sessions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub user_id: String,
    pub sessions: Vec<Session>,
}

impl Trace {
    pub fn new(user_id: impl Into<String>, sessions: Vec<Session>) -> Result<Self> {
        let trace = Trace {
            user_id: user_id.into(),
            sessions,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.sessions {
            s.validate()?;
        }
        for pair in self.sessions.windows(2) {
            if pair[1].entry <= pair[0].entry {
                return Err(Error::Validation(format!(
                    "user {}: sessions not strictly ordered at entry {}",
                    self.user_id, pair[1].entry
                )));
            }
            if pair[1].entry < pair[0].end() {
                return Err(Error::Validation(format!(
                    "user {}: session at {} overlaps the previous one ending at {}",
                    self.user_id,
                    pair[1].entry,
                    pair[0].end()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    /// Distinct locations visited (the user's mobility degree).
    pub fn distinct_locations(&self) -> BTreeSet<&str> {
        self.sessions.iter().map(|s| s.location.as_str()).collect()
    }

    /// Sessions whose entry falls strictly before `minutes` after the first entry.
    pub fn prefix_minutes(&self, minutes: i64) -> Trace {
        let Some(first) = self.sessions.first() else {
            return self.clone();
        };
        let cutoff = first.entry + minutes;
        Trace {
            user_id: self.user_id.clone(),
            sessions: self
                .sessions
                .iter()
                .filter(|s| s.entry < cutoff)
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Building,
    AccessPoint,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scale::Building => f.write_str("building"),
            Scale::AccessPoint => f.write_str("access_point"),
        }
    }
}

/// Ordered location alphabet with a bijective index.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct DomainVocab {
    scale: Scale,
    locations: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    scale: Scale,
    locations: Vec<String>,
}

impl From<VocabRepr> for DomainVocab {
    fn from(r: VocabRepr) -> Self {
        DomainVocab::from_ordered(r.scale, r.locations)
    }
}

impl From<DomainVocab> for VocabRepr {
    fn from(v: DomainVocab) -> Self {
        VocabRepr {
            scale: v.scale,
            locations: v.locations,
        }
    }
}

impl PartialEq for DomainVocab {
    fn eq(&self, other: &Self) -> bool {
        self.scale == other.scale && self.locations == other.locations
    }
}

impl Eq for DomainVocab {}

impl DomainVocab {
    /// Builds a vocabulary from an already ordered, duplicate-free list.
    pub fn from_ordered(scale: Scale, locations: Vec<String>) -> Self {
        let index = locations
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        DomainVocab {
            scale,
            locations,
            index,
        }
    }

    /// Sorted, de-duplicated vocabulary over arbitrary location ids.
    pub fn from_locations<I, S>(scale: Scale, locations: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = locations.into_iter().map(Into::into).collect();
        Self::from_ordered(scale, set.into_iter().collect())
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn locations(&self) -> &[String] {
        &self.locations
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn index_of(&self, location: &str) -> Option<usize> {
        self.index.get(location).copied()
    }

    pub fn location(&self, index: usize) -> Option<&str> {
        self.locations.get(index).map(String::as_str)
    }

    pub fn contains(&self, location: &str) -> bool {
        self.index.contains_key(location)
    }

    /// Width of one encoded session over this vocabulary.
    pub fn encoded_width(&self) -> usize {
        self.len() + TIME_FEATURE_WIDTH
    }

    /// Stable hex digest binding models to this exact ordering.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.scale.to_string().as_bytes());
        for l in &self.locations {
            h.update([0u8]);
            h.update(l.as_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }

    pub fn encode_session(&self, session: &Session) -> Result<EncodedStep> {
        let location = self
            .index_of(&session.location)
            .ok_or_else(|| Error::Domain(session.location.clone()))?;
        Ok(EncodedStep {
            location,
            slot: discretize_entry(minute_of_day(session.entry))?,
            duration_bin: discretize_duration(session.duration)?,
            day: session.day_of_week as usize,
        })
    }

    pub fn decode_step(&self, step: &EncodedStep) -> Result<DiscretizedSession> {
        let location = self
            .location(step.location)
            .ok_or_else(|| Error::input(format!("location index {} out of range", step.location)))?;
        Ok(DiscretizedSession {
            location: location.to_owned(),
            slot: step.slot,
            duration_bin: step.duration_bin,
            day: step.day,
        })
    }
}

/// Every location appearing in `traces`, sorted lexicographically.
pub fn build_vocab(traces: &[Trace], scale: Scale) -> Result<DomainVocab> {
    if traces.is_empty() {
        return Err(Error::input("cannot build a vocabulary from zero traces"));
    }
    Ok(DomainVocab::from_locations(
        scale,
        traces
            .iter()
            .flat_map(|t| t.sessions.iter().map(|s| s.location.clone())),
    ))
}

/// Extends a target vocabulary with the source's missing categories.
///
/// The result encodes target data with the source ordering, so the one-hot
/// width is `|D_s|` and source indices never move.
pub fn equalize_domain(target: &DomainVocab, source: &DomainVocab) -> Result<DomainVocab> {
    if target.scale != source.scale {
        return Err(Error::contract(format!(
            "scale mismatch: target is {}, source is {}",
            target.scale, source.scale
        )));
    }
    if let Some(missing) = target.locations.iter().find(|l| !source.contains(l)) {
        return Err(Error::Domain(missing.clone()));
    }
    Ok(source.clone())
}

/// Session discretized to model resolution.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DiscretizedSession {
    pub location: String,
    pub slot: usize,
    pub duration_bin: usize,
    pub day: usize,
}

impl DiscretizedSession {
    pub fn of(session: &Session) -> Self {
        DiscretizedSession {
            location: session.location.clone(),
            slot: session.slot(),
            duration_bin: session.duration_bin(),
            day: session.day_of_week as usize,
        }
    }
}

/// One session as block indices; the dense form is four one-hot blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EncodedStep {
    pub location: usize,
    pub slot: usize,
    pub duration_bin: usize,
    pub day: usize,
}

impl EncodedStep {
    /// Positions of the four hot entries in the dense vector.
    pub fn hot_indices(&self, n_locations: usize) -> [usize; 4] {
        [
            self.location,
            n_locations + self.slot,
            n_locations + ENTRY_SLOTS + self.duration_bin,
            n_locations + ENTRY_SLOTS + DURATION_BINS + self.day,
        ]
    }

    pub fn write_dense(&self, n_locations: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in self.hot_indices(n_locations) {
            out[i] = 1.0;
        }
    }

    pub fn to_dense(&self, n_locations: usize) -> Vec<f64> {
        let mut v = vec![0.0; n_locations + TIME_FEATURE_WIDTH];
        self.write_dense(n_locations, &mut v);
        v
    }

    /// Inverse of [`write_dense`](Self::write_dense); `None` unless every block is one-hot.
    pub fn from_dense(n_locations: usize, dense: &[f64]) -> Option<Self> {
        if dense.len() != n_locations + TIME_FEATURE_WIDTH {
            return None;
        }
        let hot = |block: &[f64]| -> Option<usize> {
            let mut found = None;
            for (i, &v) in block.iter().enumerate() {
                if v == 1.0 {
                    if found.is_some() {
                        return None;
                    }
                    found = Some(i);
                } else if v != 0.0 {
                    return None;
                }
            }
            found
        };
        let (loc, rest) = dense.split_at(n_locations);
        let (slot, rest) = rest.split_at(ENTRY_SLOTS);
        let (dur, day) = rest.split_at(DURATION_BINS);
        Some(EncodedStep {
            location: hot(loc)?,
            slot: hot(slot)?,
            duration_bin: hot(dur)?,
            day: hot(day)?,
        })
    }
}

/// Model input `(x_{t-2}, x_{t-1})` with target label `l_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub prev2: EncodedStep,
    pub prev1: EncodedStep,
    pub label: usize,
    /// Absolute entry minute of the labelled session; orders pooled windows.
    pub time: i64,
}

/// One window per consecutive session triple; fewer than three sessions gives none.
pub fn windowize(trace: &Trace, vocab: &DomainVocab) -> Result<Vec<Window>> {
    if trace.sessions.len() < 3 {
        return Ok(Vec::new());
    }
    let encoded = trace
        .sessions
        .iter()
        .map(|s| vocab.encode_session(s))
        .collect::<Result<Vec<_>>>()?;
    Ok(encoded
        .windows(3)
        .zip(trace.sessions.windows(3))
        .map(|(e, s)| Window {
            prev2: e[0],
            prev1: e[1],
            label: e[2].location,
            time: s[2].entry,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn entry_slots() {
        assert_eq!(discretize_entry(617).unwrap(), 20);
        assert_eq!(discretize_entry(0).unwrap(), 0);
        assert_eq!(discretize_entry(23 * 60 + 59).unwrap(), 47);
        assert!(discretize_entry(1440).is_err());
        assert!(discretize_entry(-1).is_err());
    }

    #[test]
    fn duration_bins() {
        assert_eq!(discretize_duration(5).unwrap(), 0);
        assert_eq!(discretize_duration(10).unwrap(), 0);
        assert_eq!(discretize_duration(11).unwrap(), 1);
        assert_eq!(discretize_duration(240).unwrap(), 23);
        assert_eq!(discretize_duration(247).unwrap(), 23);
        assert!(discretize_duration(0).is_err());
        assert!(discretize_duration(-3).is_err());
    }

    #[test]
    fn day_of_week_epoch() {
        // 2019-09-02 was a Monday.
        let monday = chrono::NaiveDate::from_ymd_opt(2019, 9, 2)
            .unwrap()
            .and_hms_opt(10, 0, 0)
            .unwrap();
        let minutes = monday.and_utc().timestamp() / 60;
        assert_eq!(day_of_week(minutes), 0);
        assert_eq!(day_of_week(minutes + 6 * MINUTES_PER_DAY), 6);
    }

    fn trace_over(locs: &[&str]) -> Trace {
        let sessions = locs
            .iter()
            .enumerate()
            .map(|(i, l)| Session::new(*l, 600 + 60 * i as i64, 30).unwrap())
            .collect();
        Trace::new("u", sessions).unwrap()
    }

    #[test]
    fn vocab_sorted_union() {
        let v = build_vocab(&[trace_over(&["B", "A"])], Scale::Building).unwrap();
        assert_eq!(v.locations(), ["A", "B"]);
        let v = build_vocab(
            &[trace_over(&["A"]), trace_over(&["A", "C", "C", "A"])],
            Scale::Building,
        )
        .unwrap();
        assert_eq!(v.locations(), ["A", "C"]);
        assert!(build_vocab(&[], Scale::Building).is_err());
    }

    #[test]
    fn equalization() {
        let s = DomainVocab::from_locations(Scale::Building, ["A", "B", "C", "D"]);
        let t = DomainVocab::from_locations(Scale::Building, ["B", "D"]);
        let eq = equalize_domain(&t, &s).unwrap();
        assert_eq!(eq.locations(), ["A", "B", "C", "D"]);
        assert_eq!(eq.encoded_width(), 4 + TIME_FEATURE_WIDTH);
        assert_eq!(equalize_domain(&s, &s).unwrap(), s);

        let bad = DomainVocab::from_locations(Scale::Building, ["E"]);
        let ab = DomainVocab::from_locations(Scale::Building, ["A", "B"]);
        assert!(matches!(equalize_domain(&bad, &ab), Err(Error::Domain(l)) if l == "E"));

        let ap = DomainVocab::from_locations(Scale::AccessPoint, ["B"]);
        assert!(matches!(equalize_domain(&ap, &s), Err(Error::Contract(_))));
    }

    #[test]
    fn window_counts_and_labels() {
        let v = DomainVocab::from_locations(Scale::Building, ["A", "B", "C"]);
        let w = windowize(&trace_over(&["A", "B", "C"]), &v).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].label, v.index_of("C").unwrap());
        let ten: Vec<&str> = (0..10).map(|i| ["A", "B", "C"][i % 3]).collect();
        assert_eq!(windowize(&trace_over(&ten), &v).unwrap().len(), 8);
        assert!(windowize(&trace_over(&["A", "B"]), &v).unwrap().is_empty());
    }

    #[test]
    fn trace_rejects_overlap_and_disorder() {
        let a = Session::new("A", 100, 50).unwrap();
        let b = Session::new("B", 120, 10).unwrap();
        assert!(Trace::new("u", vec![a.clone(), b]).is_err());
        let c = Session::new("B", 50, 10).unwrap();
        assert!(Trace::new("u", vec![a, c]).is_err());
        assert!(Session::new("A", 0, 0).is_err());
    }

    fn arb_session() -> impl Strategy<Value = (usize, i64, i64)> {
        (0usize..7, 0i64..(400 * MINUTES_PER_DAY), 1i64..600)
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip((loc, entry, dur) in arb_session()) {
            let vocab = DomainVocab::from_locations(
                Scale::Building,
                ["L0", "L1", "L2", "L3", "L4", "L5", "L6"],
            );
            let s = Session::new(format!("L{loc}"), entry, dur).unwrap();
            let enc = vocab.encode_session(&s).unwrap();
            let dense = enc.to_dense(vocab.len());
            prop_assert_eq!(dense.len(), vocab.len() + 48 + 24 + 7);
            let blocks = [
                &dense[..7],
                &dense[7..55],
                &dense[55..79],
                &dense[79..],
            ];
            for b in blocks {
                prop_assert_eq!(b.iter().sum::<f64>(), 1.0);
            }
            prop_assert_eq!(EncodedStep::from_dense(vocab.len(), &dense), Some(enc));
            prop_assert_eq!(vocab.decode_step(&enc).unwrap(), DiscretizedSession::of(&s));
        }

        #[test]
        fn window_count_is_n_minus_two(n in 0usize..40) {
            let v = DomainVocab::from_locations(Scale::Building, ["A", "B"]);
            let locs: Vec<&str> = (0..n).map(|i| if i % 2 == 0 { "A" } else { "B" }).collect();
            let w = windowize(&trace_over(&locs), &v).unwrap();
            prop_assert_eq!(w.len(), n.saturating_sub(2));
        }

        #[test]
        fn equalization_keeps_source_order(mask in proptest::collection::vec(any::<bool>(), 8)) {
            let source = DomainVocab::from_locations(
                Scale::Building,
                (0..8).map(|i| format!("S{i}")),
            );
            let subset: Vec<String> = source
                .locations()
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| m)
                .map(|(l, _)| l.clone())
                .collect();
            let target = DomainVocab::from_locations(Scale::Building, subset);
            let eq = equalize_domain(&target, &source).unwrap();
            for (i, l) in source.locations().iter().enumerate() {
                prop_assert_eq!(eq.index_of(l), Some(i));
            }
        }
    }
}
