//! Orchestration of the phases, the black-box deployment surface, metrics
//! and report emission.

mod attack;
mod blackbox;
mod config;
mod experiment;
mod metrics;
mod phases;

pub use attack::{attack_user, select_targets, AttackRow, CollapseRow, GridSpec, ServiceRow, UserAttack};
pub use blackbox::{deploy, Answer, BlackBoxHandle, DEFAULT_PRECISION};
pub use config::{
    AttackSettings, ExperimentConfig, GeneralTraining, PredictabilityStudy, Seeds, UpdateSettings,
};
pub use experiment::{
    analyze, run_experiment, study_levels, synthesize, write_attack_reports, write_report, Analysis, CellSummary,
    Cohort, CollapseSummary, Correlations, ExperimentReport, Layout, LeakageRow, PersonalRow, PhaseCosts, Pipeline,
    StudyRow, HEADLINE,
};
pub use metrics::{correlate, leakage_reduction, pearson, permutation_p_value, topk_accuracy, topk_hits, Correlation, Ranker};
pub use phases::{
    measured, phase_initial_training, phase_personalize, phase_update, prepare_user, thread_cpu_seconds, top123,
    update_study, user_seed, Cost, GeneralInfo, GeneralModel, PersonalModel, TopK, UpdateOutcome, UserData,
};
