//! Marginal priors over the sensitive location variable.

use serde::{Deserialize, Serialize};

use super::ConfidenceOracle;
use crate::error::{Error, Result};
use crate::trace::{DomainVocab, EncodedStep, Trace};

/// Mass the estimate prior puts on the modal location.
pub const ESTIMATE_MODAL_MASS: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    /// Empirical location frequencies of the user's training trace.
    True,
    /// Uniform.
    None,
    /// Mean model output over probe queries.
    Predict,
    /// Most of the mass on the modal predicted location, the rest spread evenly.
    Estimate,
}

impl PriorMode {
    pub const ALL: [PriorMode; 4] = [PriorMode::True, PriorMode::None, PriorMode::Predict, PriorMode::Estimate];

    pub fn name(self) -> &'static str {
        match self {
            PriorMode::True => "true",
            PriorMode::None => "none",
            PriorMode::Predict => "predict",
            PriorMode::Estimate => "estimate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::input(format!("unknown prior mode `{s}`")))
    }
}

impl std::fmt::Display for PriorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub mode: PriorMode,
    pub values: Vec<f64>,
}

impl Prior {
    pub fn uniform(m: usize) -> Self {
        Prior {
            mode: PriorMode::None,
            values: vec![1.0 / m as f64; m],
        }
    }

    /// `ln p(location)`; `-inf` for zero mass.
    pub fn ln(&self, location: usize) -> f64 {
        self.values[location].ln()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Highest-mass location, ties to the lower index.
    pub fn mode_index(&self) -> usize {
        crate::seqnet::argsort_desc(&self.values)[0]
    }
}

fn estimate_from(predicted: &[f64]) -> Vec<f64> {
    let m = predicted.len();
    if m == 1 {
        return vec![1.0];
    }
    let modal = crate::seqnet::argsort_desc(predicted)[0];
    let rest = (1.0 - ESTIMATE_MODAL_MASS) / (m - 1) as f64;
    (0..m).map(|i| if i == modal { ESTIMATE_MODAL_MASS } else { rest }).collect()
}

/// Builds a prior over `vocab`.
///
/// `truth` is only consulted for [`PriorMode::True`]; `oracle` and `probes`
/// only for the predict and estimate modes.
pub fn build_prior(
    mode: PriorMode,
    truth: Option<&Trace>,
    oracle: Option<&dyn ConfidenceOracle>,
    probes: &[(EncodedStep, EncodedStep)],
    vocab: &DomainVocab,
) -> Result<Prior> {
    let m = vocab.len();
    let values = match mode {
        PriorMode::None => vec![1.0 / m as f64; m],
        PriorMode::True => {
            let trace = truth.ok_or_else(|| Error::config("the true prior needs the user's training trace"))?;
            if trace.sessions.is_empty() {
                return Err(Error::input("the true prior needs a non-empty trace"));
            }
            let mut counts = vec![0.0; m];
            for s in &trace.sessions {
                let i = vocab.index_of(&s.location).ok_or_else(|| Error::Domain(s.location.clone()))?;
                counts[i] += 1.0;
            }
            let n = trace.sessions.len() as f64;
            counts.into_iter().map(|c| c / n).collect()
        }
        PriorMode::Predict | PriorMode::Estimate => {
            let oracle = oracle.ok_or_else(|| Error::config("predict and estimate priors need query access"))?;
            if probes.is_empty() {
                return Err(Error::config("predict and estimate priors need a positive probe budget"));
            }
            let out = oracle.confidences(probes);
            let mean = out.mean_axis(ndarray::Axis(0)).expect("non-empty probes");
            let total = mean.sum();
            let predicted: Vec<f64> = if total > 0.0 {
                mean.iter().map(|v| v / total).collect()
            } else {
                vec![1.0 / m as f64; m]
            };
            if mode == PriorMode::Predict {
                predicted
            } else {
                estimate_from(&predicted)
            }
        }
    };
    Ok(Prior { mode, values })
}
