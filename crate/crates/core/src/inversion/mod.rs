//! Model-inversion attacks that reconstruct a user's earlier locations from
//! a personal model's outputs.
//!
//! An adversary observes the next location `l_t` and queries the model. What
//! it knows about the two input steps depends on its kind:
//!
//! | kind | knows `x_{t-2}` | knows `x_{t-1}` |
//! |------|-----------------|-----------------|
//! | A1   | yes             | no              |
//! | A2   | no              | yes             |
//! | A3   | no              | no              |

mod enumerate;
mod gradient;
mod prior;
mod probes;
mod report;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use enumerate::{attack_brute_force, attack_time_based, enumeration_size, BruteForceFilter};
pub use gradient::{attack_gradient, GradientConfig, GradientInit, InputGradient, WhiteBox};
pub use prior::{build_prior, Prior, PriorMode};
pub use probes::{candidate_locations, sample_probes};
pub use report::{attack_accuracy, write_attack_csv, AttackReport, RankedLocations, WindowAttack};

use crate::error::{Error, Result};
use crate::seqnet::SeqModel;
use crate::trace::{DomainVocab, EncodedStep, Session, Trace};

/// Anything that answers confidence queries for `(x_{t-2}, x_{t-1})` pairs.
///
/// Each row of the result is the reported distribution over locations.
pub trait ConfidenceOracle: Sync {
    fn confidences(&self, pairs: &[(EncodedStep, EncodedStep)]) -> Array2<f64>;
}

impl ConfidenceOracle for SeqModel {
    fn confidences(&self, pairs: &[(EncodedStep, EncodedStep)]) -> Array2<f64> {
        crate::seqnet::softmax_rows(&self.logits(pairs), self.temperature)
    }
}

impl<F> ConfidenceOracle for F
where
    F: Fn(&[(EncodedStep, EncodedStep)]) -> Array2<f64> + Sync,
{
    fn confidences(&self, pairs: &[(EncodedStep, EncodedStep)]) -> Array2<f64> {
        self(pairs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AdversaryKind {
    A1,
    A2,
    A3,
}

impl AdversaryKind {
    pub fn knows_prev2(self) -> bool {
        self == AdversaryKind::A1
    }

    pub fn knows_prev1(self) -> bool {
        self == AdversaryKind::A2
    }

    /// Input steps the adversary reconstructs (0 = `x_{t-2}`, 1 = `x_{t-1}`).
    pub fn unknown_steps(self) -> &'static [usize] {
        match self {
            AdversaryKind::A1 => &[1],
            AdversaryKind::A2 => &[0],
            AdversaryKind::A3 => &[0, 1],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A1" => Ok(AdversaryKind::A1),
            "A2" => Ok(AdversaryKind::A2),
            "A3" => Ok(AdversaryKind::A3),
            _ => Err(Error::input(format!("unknown adversary `{s}`"))),
        }
    }
}

impl std::fmt::Display for AdversaryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    BruteForce,
    TimeBased,
    Gradient,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::BruteForce => "brute_force",
            Strategy::TimeBased => "time_based",
            Strategy::Gradient => "gradient",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Strategy::BruteForce, Strategy::TimeBased, Strategy::Gradient]
            .into_iter()
            .find(|v| v.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::input(format!("unknown strategy `{s}`")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_threshold() -> f64 {
    0.01
}

fn default_budget() -> usize {
    200
}

fn default_max_enumeration() -> u64 {
    1 << 24
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    pub kind: AdversaryKind,
    pub prior_mode: PriorMode,
    #[serde(default = "default_threshold")]
    pub candidate_threshold: f64,
    #[serde(default = "default_budget")]
    pub probe_budget: usize,
    /// Largest candidate space an enumeration attack may visit per window.
    #[serde(default = "default_max_enumeration")]
    pub max_enumeration: u64,
}

impl AdversaryConfig {
    pub fn new(kind: AdversaryKind, prior_mode: PriorMode) -> Self {
        AdversaryConfig {
            kind,
            prior_mode,
            candidate_threshold: default_threshold(),
            probe_budget: default_budget(),
            max_enumeration: default_max_enumeration(),
        }
    }

    pub fn knows_x_prev2(&self) -> bool {
        self.kind.knows_prev2()
    }

    pub fn knows_x_prev1(&self) -> bool {
        self.kind.knows_prev1()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.candidate_threshold > 0.0 && self.candidate_threshold < 1.0) {
            return Err(Error::config("candidate threshold must lie in (0, 1)"));
        }
        if self.probe_budget == 0 && matches!(self.prior_mode, PriorMode::Predict | PriorMode::Estimate) {
            return Err(Error::config("predict and estimate priors need a positive probe budget"));
        }
        Ok(())
    }
}

/// One window under attack: the two raw input sessions and the observed label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackTarget {
    pub prev2: Session,
    pub prev1: Session,
    pub label: usize,
    /// Entry minute of the labelled session.
    pub label_entry: i64,
}

impl AttackTarget {
    /// Vocabulary index of the true location at each unknown step.
    pub fn truth(&self, kind: AdversaryKind, vocab: &DomainVocab) -> Result<Vec<usize>> {
        kind.unknown_steps()
            .iter()
            .map(|&s| {
                let loc = if s == 0 { &self.prev2.location } else { &self.prev1.location };
                vocab.index_of(loc).ok_or_else(|| Error::Domain(loc.clone()))
            })
            .collect()
    }
}

/// Attack targets for every consecutive session triple of `trace`.
pub fn attack_targets(trace: &Trace, vocab: &DomainVocab) -> Result<Vec<AttackTarget>> {
    trace
        .sessions
        .windows(3)
        .map(|s| {
            let label = vocab
                .index_of(&s[2].location)
                .ok_or_else(|| Error::Domain(s[2].location.clone()))?;
            Ok(AttackTarget {
                prev2: s[0].clone(),
                prev1: s[1].clone(),
                label,
                label_entry: s[2].entry,
            })
        })
        .collect()
}

/// Inputs shared by every window of one attack run.
#[derive(Debug, Clone, Copy)]
pub struct AttackContext<'a> {
    pub adversary: &'a AdversaryConfig,
    pub vocab: &'a DomainVocab,
    /// Scored side by side; one report entry per prior.
    pub priors: &'a [Prior],
    /// Locations the time-based strategy enumerates.
    pub candidates: &'a [usize],
    /// Seeds the per-window tie-breaking keys.
    pub tie_seed: u64,
}
