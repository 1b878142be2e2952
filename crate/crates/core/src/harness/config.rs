//! Experiment configuration (one JSON document).

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::{AdversaryKind, GradientConfig, PriorMode, Strategy};
use crate::personalize::{PersonalizationMethod, PersonalizeConfig};
use crate::seqnet::TrainConfig;
use crate::synth::CohortSpec;
use crate::trace::{DomainVocab, Scale};

/// Every random stream of an experiment. All fields are required.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub general_init: u64,
    pub general_train: u64,
    pub personalize: u64,
    pub probes: u64,
    pub ties: u64,
    pub permutation: u64,
}

impl Seeds {
    /// Distinct streams derived from one master seed.
    pub fn derived(master: u64) -> Self {
        let s = |i: u64| master.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        Seeds {
            general_init: s(1),
            general_train: s(2),
            personalize: s(3),
            probes: s(4),
            ties: s(5),
            permutation: s(6),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralTraining {
    pub n_layers: usize,
    /// Grid searched with time-ordered cross-validation when it has more than one point.
    pub hidden_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub dropout: f64,
    pub cv_folds: usize,
    /// Tail of the pooled training windows held out for early stopping.
    pub validation_fraction: f64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSettings {
    /// The personalization method whose models are attacked.
    pub method: PersonalizationMethod,
    pub adversaries: Vec<AdversaryKind>,
    pub strategies: Vec<Strategy>,
    /// Strategies also run at the defended temperatures. The others only face
    /// the undefended deployment.
    pub sweep_strategies: Vec<Strategy>,
    pub priors: Vec<PriorMode>,
    pub k_values: Vec<usize>,
    /// Inference temperatures swept by the defense; 1 is the undefended deployment.
    pub temperatures: Vec<f64>,
    pub precision: u32,
    pub candidate_threshold: f64,
    pub probe_budget: usize,
    pub max_enumeration: u64,
    /// Tail fraction of each target's training windows that is attacked.
    pub window_fraction: f64,
    pub max_windows_per_user: Option<usize>,
    pub gradient: GradientConfig,
}

/// Personalize on the first weeks, then update with the full training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateSettings {
    pub initial_weeks: u32,
    pub methods: Vec<PersonalizationMethod>,
    pub train: TrainConfig,
}

/// Extra targets with predictability spread evenly over a range, each
/// personalized with the attacked method and attacked once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictabilityStudy {
    pub n_users: usize,
    pub predictability: (f64, f64),
    pub adversary: AdversaryKind,
    pub strategy: Strategy,
    pub prior: PriorMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub cohort: CohortSpec,
    pub scale: Scale,
    /// Temporal per-user train fraction.
    pub train_fraction: f64,
    pub methods: Vec<PersonalizationMethod>,
    pub general: GeneralTraining,
    pub personalize: PersonalizeConfig,
    pub attack: AttackSettings,
    pub update: Option<UpdateSettings>,
    pub study: Option<PredictabilityStudy>,
    pub permutation_resamples: usize,
    pub seeds: Seeds,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// 40 contributors, 10 targets, 12 buildings, 8 weeks.
    pub fn desk() -> Self {
        let seeds = Seeds::derived(2019);
        ExperimentConfig {
            name: "desk".into(),
            cohort: CohortSpec::desk(),
            scale: Scale::Building,
            train_fraction: 0.8,
            methods: PersonalizationMethod::ALL.to_vec(),
            general: GeneralTraining {
                n_layers: 2,
                hidden_sizes: vec![128],
                learning_rates: vec![1e-3],
                dropout: 0.1,
                cv_folds: 3,
                validation_fraction: 0.1,
                train: TrainConfig {
                    learning_rate: 1e-3,
                    ..TrainConfig::default()
                },
            },
            personalize: PersonalizeConfig {
                train: TrainConfig {
                    learning_rate: 1e-3,
                    batch_size: 32,
                    ..TrainConfig::default()
                },
                learning_rates: vec![1e-3],
                ..PersonalizeConfig::default()
            },
            attack: AttackSettings {
                method: PersonalizationMethod::TlFe,
                adversaries: vec![AdversaryKind::A1, AdversaryKind::A2],
                strategies: vec![Strategy::BruteForce, Strategy::TimeBased, Strategy::Gradient],
                sweep_strategies: vec![Strategy::TimeBased],
                priors: PriorMode::ALL.to_vec(),
                k_values: vec![1, 2, 3, 5],
                temperatures: vec![1.0, 0.5, 0.1, 0.05, 0.01],
                precision: 4,
                candidate_threshold: 0.01,
                probe_budget: 200,
                max_enumeration: 1 << 24,
                window_fraction: 0.25,
                max_windows_per_user: Some(15),
                gradient: GradientConfig {
                    steps: 50,
                    ..GradientConfig::default()
                },
            },
            update: Some(UpdateSettings {
                initial_weeks: 2,
                methods: vec![
                    PersonalizationMethod::PersonalLstm,
                    PersonalizationMethod::TlFe,
                    PersonalizationMethod::TlFt,
                ],
                train: TrainConfig {
                    learning_rate: 1e-3,
                    batch_size: 32,
                    ..TrainConfig::default()
                },
            }),
            study: Some(PredictabilityStudy {
                n_users: 20,
                predictability: (0.3, 1.0),
                adversary: AdversaryKind::A1,
                strategy: Strategy::TimeBased,
                prior: PriorMode::True,
            }),
            permutation_resamples: 1000,
            seeds,
            output_dir: None,
        }
    }

    /// Three users over six locations for one week.
    pub fn smoke() -> Self {
        let mut c = Self::desk();
        c.name = "smoke".into();
        c.cohort = CohortSpec {
            n_contributors: 3,
            n_targets: 3,
            vocab: DomainVocab::from_locations(Scale::Building, (0..6).map(|i| format!("bldg-{i:02}"))),
            weeks: 1,
            global_seed: 7,
            mobility_degree: (3, 5),
            predictability: (0.6, 0.95),
            dwell_minutes: (60.0, 150.0),
            max_gap_minutes: 0,
            start_date: NaiveDate::from_ymd_opt(2019, 9, 2).expect("valid date"),
        };
        c.general.hidden_sizes = vec![16];
        c.general.train.max_epochs = 15;
        c.general.train.batch_size = 32;
        c.personalize.hidden_sizes = vec![8, 16];
        c.personalize.min_windows = 20;
        c.personalize.train.max_epochs = 10;
        c.attack.max_windows_per_user = Some(4);
        c.attack.probe_budget = 50;
        c.attack.gradient.steps = 30;
        c.update = Some(UpdateSettings {
            initial_weeks: 1,
            methods: vec![PersonalizationMethod::TlFe],
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 32,
                max_epochs: 5,
                patience: 2,
                ..TrainConfig::default()
            },
        });
        c.study = None;
        c.permutation_resamples = 200;
        c.seeds = Seeds::derived(7);
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "smoke" => Ok(Self::smoke()),
            _ => Err(Error::config(format!("unknown preset `{name}` (desk, smoke)"))),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Replaces every seed with streams derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.cohort.global_seed = seed;
        self.seeds = Seeds::derived(seed);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        if self.cohort.n_contributors < 2 {
            return Err(Error::config("the general model needs at least two contributors"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train fraction must lie in (0, 1)"));
        }
        let g = &self.general;
        if g.n_layers == 0 || g.hidden_sizes.is_empty() || g.learning_rates.is_empty() {
            return Err(Error::config("general training needs layers, hidden sizes and learning rates"));
        }
        let a = &self.attack;
        if a.temperatures.is_empty() || a.temperatures.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::config("temperatures must be positive"));
        }
        if !a.temperatures.contains(&1.0) {
            return Err(Error::config("the temperature sweep must include the undefended deployment (1.0)"));
        }
        if a.sweep_strategies.iter().any(|s| !a.strategies.contains(s)) {
            return Err(Error::config("swept strategies must be among the attack strategies"));
        }
        if a.k_values.iter().any(|&k| k == 0 || k > self.cohort.vocab.len()) {
            return Err(Error::config("every k must lie in [1, |L|]"));
        }
        if !(a.window_fraction > 0.0 && a.window_fraction <= 1.0) {
            return Err(Error::config("attack window fraction must lie in (0, 1]"));
        }
        if a.priors.iter().any(|p| matches!(p, PriorMode::Predict | PriorMode::Estimate)) && a.probe_budget == 0 {
            return Err(Error::config("predict and estimate priors need a positive probe budget"));
        }
        if !self.methods.contains(&a.method) {
            return Err(Error::config(format!("attacked method {} is not personalized", a.method)));
        }
        if let Some(u) = &self.update {
            if u.methods.contains(&PersonalizationMethod::Reuse) {
                return Err(Error::config("a reused general model cannot be updated"));
            }
        }
        if let Some(s) = &self.study {
            let (lo, hi) = s.predictability;
            if s.n_users < 3 || !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
                return Err(Error::config("predictability study needs 3+ users over an ordered range in [0, 1]"));
            }
        }
        Ok(())
    }
}
