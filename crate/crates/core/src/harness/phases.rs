//! Initial training, personalization and updates, with per-phase CPU accounting.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, GeneralTraining, UpdateSettings};
use super::metrics::{topk_accuracy, Ranker};
use crate::error::{Error, Result};
use crate::personalize::{personalize, update_model, verify_lineage, PersonalizationMethod, PersonalizeConfig};
use crate::seqnet::{grid_search_cv, init_model, train, ArchConfig, Candidate, SeqModel, TrainConfig};
use crate::synth::split_train_test;
use crate::trace::{build_vocab, equalize_domain, windowize, DomainVocab, Trace, Window, MINUTES_PER_DAY};

/// CPU seconds consumed by the calling thread.
pub fn thread_cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid out-pointer for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

/// CPU and wall time of one phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Cost {
    pub cpu_seconds: f64,
    pub wall_seconds: f64,
}

/// Runs `f` on the current thread and measures it.
pub fn measured<T>(f: impl FnOnce() -> T) -> (T, Cost) {
    let cpu = thread_cpu_seconds();
    let wall = Instant::now();
    let out = f();
    let cost = Cost {
        cpu_seconds: thread_cpu_seconds() - cpu,
        wall_seconds: wall.elapsed().as_secs_f64(),
    };
    (out, cost)
}

/// Top-1/2/3 accuracy in percent.
pub type TopK = [f64; 3];

pub fn top123(ranker: &dyn Ranker, windows: &[Window]) -> Result<TopK> {
    Ok([
        topk_accuracy(ranker, windows, 1)?,
        topk_accuracy(ranker, windows, 2)?,
        topk_accuracy(ranker, windows, 3)?,
    ])
}

/// Seed for the `index`-th user derived from a stream seed.
pub fn user_seed(stream: u64, index: usize) -> u64 {
    stream ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// How the general model was chosen and how well it does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralInfo {
    pub fingerprint: String,
    pub locations: usize,
    pub hidden_size: usize,
    pub learning_rate: f64,
    /// Mean fold top-1 per grid candidate, when more than one was searched.
    pub cv_scores: Option<Vec<f64>>,
    pub train_windows: usize,
    pub test_windows: usize,
    pub train_accuracy: TopK,
    pub test_accuracy: TopK,
    pub epochs_run: usize,
    pub cost: Cost,
}

/// The general model with its vocabulary.
#[derive(Debug, Clone)]
pub struct GeneralModel {
    pub vocab: DomainVocab,
    pub model: SeqModel,
    pub info: GeneralInfo,
}

/// Pooled contributor windows: per-user temporal split, training windows
/// ordered by time.
fn pooled_windows(contributors: &[Trace], vocab: &DomainVocab, train_fraction: f64) -> Result<(Vec<Window>, Vec<Window>)> {
    let mut train_w = Vec::new();
    let mut test_w = Vec::new();
    for t in contributors {
        let (tr, te) = split_train_test(t, train_fraction)?;
        train_w.extend(windowize(&tr, vocab)?);
        test_w.extend(windowize(&te, vocab)?);
    }
    train_w.sort_by_key(|w| w.time);
    Ok((train_w, test_w))
}

fn fit_general(
    vocab: &DomainVocab,
    g: &GeneralTraining,
    cand: &Candidate,
    windows: &[Window],
    validation: Option<&[Window]>,
    init_seed: u64,
) -> Result<(SeqModel, usize)> {
    let mut arch = ArchConfig::stacked(vocab.encoded_width(), cand.hidden_size, g.n_layers, vocab.len());
    arch.dropout = g.dropout;
    let start = init_model(&arch, vocab, init_seed)?;
    let (tr, va) = match validation {
        Some(v) => (windows, v),
        None => {
            let n_val = ((windows.len() as f64 * g.validation_fraction).round() as usize).min(windows.len() - 1);
            windows.split_at(windows.len() - n_val)
        }
    };
    let (m, h) = train(&start, tr, va, &cand.train)?;
    Ok((m, h.epochs_run()))
}

/// Builds the vocabulary over the contributors and trains the general model,
/// grid-searching when the configuration offers more than one candidate.
pub fn phase_initial_training(contributors: &[Trace], cfg: &ExperimentConfig) -> Result<GeneralModel> {
    if contributors.len() < 2 {
        return Err(Error::input(format!(
            "initial training needs at least two contributors, got {}",
            contributors.len()
        )));
    }
    let (fitted, cost) = measured(|| -> Result<_> {
        let vocab = build_vocab(contributors, cfg.scale)?;
        let (train_w, test_w) = pooled_windows(contributors, &vocab, cfg.train_fraction)?;
        if train_w.len() < 2 {
            return Err(Error::Training(format!("only {} pooled training windows", train_w.len())));
        }
        let g = &cfg.general;
        let mut grid = Vec::new();
        for &h in &g.hidden_sizes {
            for &lr in &g.learning_rates {
                grid.push(Candidate {
                    hidden_size: h,
                    train: TrainConfig {
                        learning_rate: lr,
                        seed: cfg.seeds.general_train,
                        ..g.train.clone()
                    },
                });
            }
        }
        let init = cfg.seeds.general_init;
        let outcome = grid_search_cv(&train_w, &grid, g.cv_folds, |c, tr, va| {
            Ok(fit_general(&vocab, g, c, tr, Some(va), init)?.0)
        })?;
        let (model, epochs) = fit_general(&vocab, g, &outcome.chosen, &train_w, None, init)?;
        let cv_scores = (grid.len() > 1).then(|| outcome.scores.clone());
        Ok((vocab, model, outcome.chosen, cv_scores, epochs, train_w, test_w))
    });
    let (vocab, model, chosen, cv_scores, epochs_run, train_w, test_w) = fitted?;
    let info = GeneralInfo {
        fingerprint: model.fingerprint(),
        locations: vocab.len(),
        hidden_size: chosen.hidden_size,
        learning_rate: chosen.train.learning_rate,
        cv_scores,
        train_windows: train_w.len(),
        test_windows: test_w.len(),
        train_accuracy: top123(&model, &train_w)?,
        test_accuracy: top123(&model, &test_w)?,
        epochs_run,
        cost,
    };
    Ok(GeneralModel { vocab, model, info })
}

/// One target user's data, encoded against the general vocabulary.
#[derive(Debug, Clone)]
pub struct UserData {
    pub user_id: String,
    pub train: Trace,
    pub test: Trace,
    pub train_windows: Vec<Window>,
    pub test_windows: Vec<Window>,
    pub mobility_degree: usize,
}

/// Temporal split and domain equalization of a target trace.
pub fn prepare_user(trace: &Trace, general_vocab: &DomainVocab, train_fraction: f64) -> Result<UserData> {
    let own = build_vocab(std::slice::from_ref(trace), general_vocab.scale())?;
    let vocab = equalize_domain(&own, general_vocab)?;
    let (train, test) = split_train_test(trace, train_fraction)?;
    Ok(UserData {
        user_id: trace.user_id.clone(),
        train_windows: windowize(&train, &vocab)?,
        test_windows: windowize(&test, &vocab)?,
        mobility_degree: trace.distinct_locations().len(),
        train,
        test,
    })
}

/// A personal model with its accuracy on the user's own data.
#[derive(Debug, Clone)]
pub struct PersonalModel {
    pub user_id: String,
    pub method: PersonalizationMethod,
    pub model: SeqModel,
    pub train_accuracy: TopK,
    pub test_accuracy: TopK,
    pub cost: Cost,
}

/// Personalizes the general model on one user's training windows.
pub fn phase_personalize(
    general: &GeneralModel,
    user: &UserData,
    method: PersonalizationMethod,
    cfg: &PersonalizeConfig,
) -> Result<PersonalModel> {
    personalize_on(general, user, &user.train_windows, method, cfg)
}

fn personalize_on(
    general: &GeneralModel,
    user: &UserData,
    windows: &[Window],
    method: PersonalizationMethod,
    cfg: &PersonalizeConfig,
) -> Result<PersonalModel> {
    let (model, cost) = measured(|| personalize(method, &general.model, &general.vocab, windows, cfg));
    let model = model?;
    model.check_vocab(&general.vocab)?;
    Ok(PersonalModel {
        user_id: user.user_id.clone(),
        method,
        train_accuracy: top123(&model, windows)?,
        test_accuracy: top123(&model, &user.test_windows)?,
        model,
        cost,
    })
}

/// Continues training a personal model on new data.
///
/// A model derived from an older general model is rejected, so a general
/// refresh forces re-personalization.
pub fn phase_update(
    general: &SeqModel,
    personal: &SeqModel,
    vocab: &DomainVocab,
    windows: &[Window],
    cfg: &TrainConfig,
) -> Result<SeqModel> {
    verify_lineage(personal, general)?;
    update_model(personal, vocab, windows, cfg)
}

/// Personalization on the first weeks, then an update with all training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateOutcome {
    pub user: String,
    pub method: PersonalizationMethod,
    pub initial_windows: usize,
    pub initial_train: TopK,
    pub initial_test: TopK,
    pub updated_windows: usize,
    pub updated_train: TopK,
    pub updated_test: TopK,
}

impl UpdateOutcome {
    /// Train minus test top-1 on the short history.
    pub fn initial_gap(&self) -> f64 {
        self.initial_train[0] - self.initial_test[0]
    }
}

pub fn update_study(
    general: &GeneralModel,
    user: &UserData,
    method: PersonalizationMethod,
    settings: &UpdateSettings,
    cfg: &PersonalizeConfig,
) -> Result<UpdateOutcome> {
    let horizon = i64::from(settings.initial_weeks) * 7 * MINUTES_PER_DAY;
    let early = user.train.prefix_minutes(horizon);
    let early_w = windowize(&early, &general.vocab)?;
    let initial = personalize_on(general, user, &early_w, method, cfg)?;
    let updated = phase_update(
        &general.model,
        &initial.model,
        &general.vocab,
        &user.train_windows,
        &settings.train,
    )?;
    Ok(UpdateOutcome {
        user: user.user_id.clone(),
        method,
        initial_windows: early_w.len(),
        initial_train: initial.train_accuracy,
        initial_test: initial.test_accuracy,
        updated_windows: user.train_windows.len(),
        updated_train: top123(&updated, &user.train_windows)?,
        updated_test: top123(&updated, &user.test_windows)?,
    })
}
