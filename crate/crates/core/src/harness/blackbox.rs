//! Query-only access to a deployed model.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::inversion::ConfidenceOracle;
use crate::seqnet::{argsort_desc, softmax_rows, SeqModel};
use crate::trace::{DomainVocab, EncodedStep};

/// Decimal places shown to callers unless configured otherwise.
pub const DEFAULT_PRECISION: u32 = 4;

/// Digits at which reported values stop being rounded.
const RAW_PRECISION: u32 = 17;

/// A deployed personal model.
///
/// Callers see ranked labels and rounded confidences. Neither the parameters
/// nor the inference temperature are reachable, and serialization fails.
pub struct BlackBoxHandle {
    model: SeqModel,
    temperature: f64,
    precision: u32,
    queries: AtomicU64,
}

/// One answered query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Answer {
    /// Labels by descending confidence, computed before rounding.
    pub ranked: Vec<usize>,
    /// Rounded confidence per location.
    pub confidences: Vec<f64>,
}

/// Deploys `model` at `temperature`, reporting `precision` decimals
/// (17 or more reports raw values).
pub fn deploy(model: &SeqModel, temperature: f64, precision: u32) -> Result<BlackBoxHandle> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(format!("temperature {temperature} must be positive")));
    }
    Ok(BlackBoxHandle {
        model: model.clone(),
        temperature,
        precision,
        queries: AtomicU64::new(0),
    })
}

fn round_to(v: f64, precision: u32) -> f64 {
    if precision >= RAW_PRECISION {
        return v;
    }
    let scale = 10f64.powi(precision as i32);
    (v * scale).round() / scale
}

impl BlackBoxHandle {
    pub fn n_locations(&self) -> usize {
        self.model.n_locations()
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    /// Total inputs answered so far.
    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    /// Checks that this deployment serves `vocab`.
    pub fn check_vocab(&self, vocab: &DomainVocab) -> Result<()> {
        self.model.check_vocab(vocab)
    }

    fn logits(&self, pairs: &[(EncodedStep, EncodedStep)]) -> Array2<f64> {
        self.queries.fetch_add(pairs.len() as u64, Ordering::Relaxed);
        self.model.logits(pairs)
    }

    /// Rounded confidences, one row per input pair.
    pub fn query_batch(&self, pairs: &[(EncodedStep, EncodedStep)]) -> Array2<f64> {
        let mut p = softmax_rows(&self.logits(pairs), self.temperature);
        let precision = self.precision;
        p.mapv_inplace(|v| round_to(v, precision));
        p
    }

    /// Top-`k` labels per input pair at full precision.
    ///
    /// Ranking uses the logits, so it is the same for every temperature.
    pub fn ranked(&self, pairs: &[(EncodedStep, EncodedStep)], k: usize) -> Vec<Vec<usize>> {
        self.logits(pairs)
            .rows()
            .into_iter()
            .map(|r| {
                let mut o = argsort_desc(r.as_slice().expect("standard layout"));
                o.truncate(k);
                o
            })
            .collect()
    }

    pub fn query(&self, prev2: EncodedStep, prev1: EncodedStep) -> Result<Answer> {
        let n = self.n_locations();
        if prev2.location >= n || prev1.location >= n {
            return Err(Error::input("query references a location outside the deployed vocabulary"));
        }
        let logits = self.logits(&[(prev2, prev1)]);
        let row = logits.row(0);
        let z = row.as_slice().expect("standard layout");
        let probs = crate::seqnet::softmax_with_temperature(z, self.temperature);
        Ok(Answer {
            ranked: argsort_desc(z),
            confidences: probs.into_iter().map(|v| round_to(v, self.precision)).collect(),
        })
    }
}

impl ConfidenceOracle for BlackBoxHandle {
    fn confidences(&self, pairs: &[(EncodedStep, EncodedStep)]) -> Array2<f64> {
        self.query_batch(pairs)
    }
}

impl fmt::Debug for BlackBoxHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlackBoxHandle")
            .field("locations", &self.n_locations())
            .field("precision", &self.precision)
            .field("queries", &self.queries())
            .finish_non_exhaustive()
    }
}

impl Serialize for BlackBoxHandle {
    fn serialize<S: Serializer>(&self, _: S) -> std::result::Result<S::Ok, S::Error> {
        Err(serde::ser::Error::custom("a deployed model handle cannot be serialized"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding() {
        assert_eq!(round_to(0.123_456, 4), 0.1235);
        assert_eq!(round_to(0.999_96, 4), 1.0);
        assert_eq!(round_to(0.000_04, 4), 0.0);
        let x = 0.012_345_678_901_234_567;
        assert_eq!(round_to(x, 17), x);
    }
}
