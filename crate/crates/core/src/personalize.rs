//! Turning the general model into per-user predictors.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqnet::{
    grid_search_cv, init_model, train, ArchConfig, Candidate, Linear, LstmLayer, Role, SeqModel, TrainConfig,
};
use crate::trace::{DomainVocab, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PersonalizationMethod {
    Reuse,
    #[serde(rename = "PersonalLSTM")]
    PersonalLstm,
    #[serde(rename = "TL_FE")]
    TlFe,
    #[serde(rename = "TL_FT")]
    TlFt,
}

impl PersonalizationMethod {
    pub const ALL: [PersonalizationMethod; 4] = [
        PersonalizationMethod::Reuse,
        PersonalizationMethod::PersonalLstm,
        PersonalizationMethod::TlFe,
        PersonalizationMethod::TlFt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PersonalizationMethod::Reuse => "Reuse",
            PersonalizationMethod::PersonalLstm => "PersonalLSTM",
            PersonalizationMethod::TlFe => "TL_FE",
            PersonalizationMethod::TlFt => "TL_FT",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::input(format!("unknown personalization method `{s}`")))
    }
}

impl std::fmt::Display for PersonalizationMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizeConfig {
    /// Base optimizer settings; the grid overrides the learning rate.
    pub train: TrainConfig,
    pub learning_rates: Vec<f64>,
    pub hidden_sizes: Vec<usize>,
    pub cv_folds: usize,
    /// Fewer windows than this and the general model is reused as is.
    pub min_windows: usize,
    /// Tail fraction held out for early stopping in the final fit.
    pub validation_fraction: f64,
    pub dropout: f64,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        PersonalizeConfig {
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 32,
                max_epochs: 100,
                ..TrainConfig::default()
            },
            learning_rates: vec![1e-3, 1e-4],
            hidden_sizes: vec![32, 64],
            cv_folds: 3,
            min_windows: 30,
            validation_fraction: 0.1,
            dropout: 0.1,
        }
    }
}

fn check_windows(vocab: &DomainVocab, windows: &[Window]) -> Result<()> {
    let n = vocab.len();
    if let Some(w) = windows
        .iter()
        .find(|w| w.label >= n || w.prev1.location >= n || w.prev2.location >= n)
    {
        return Err(Error::contract(format!(
            "window at {} references a location outside the {n}-location vocabulary",
            w.time
        )));
    }
    Ok(())
}

/// Initial model and freeze mask for one candidate.
fn starting_point(
    method: PersonalizationMethod,
    general: Option<&SeqModel>,
    vocab: &DomainVocab,
    hidden: usize,
    dropout: f64,
    seed: u64,
) -> Result<(SeqModel, Vec<bool>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut model, mask) = match (method, general) {
        (PersonalizationMethod::PersonalLstm, _) => {
            let mut arch = ArchConfig::stacked(vocab.encoded_width(), hidden, 1, vocab.len());
            arch.dropout = dropout;
            arch.output_dropout = dropout > 0.0;
            (init_model(&arch, vocab, seed)?, vec![false, false])
        }
        (PersonalizationMethod::TlFe, Some(g)) => {
            let mut m = g.clone();
            let below = g.arch.top_hidden();
            m.arch.hidden_sizes.push(hidden);
            m.params.lstm.push(LstmLayer::uniform(below, hidden, &mut rng));
            m.params.head = Linear::uniform(hidden, g.arch.output_size, &mut rng);
            let mut mask = vec![true; g.arch.n_lstm_layers()];
            mask.extend([false, false]);
            (m, mask)
        }
        (PersonalizationMethod::TlFt, Some(g)) => {
            let n = g.arch.n_lstm_layers();
            let mut mask = vec![false; n + 1];
            mask[..n.saturating_sub(1)].iter_mut().for_each(|f| *f = true);
            (g.clone(), mask)
        }
        (m, _) => return Err(Error::config(format!("{m} has no trainable starting point"))),
    };
    model.role = Role::Personalized;
    model.method = Some(method);
    model.parent = general.map(SeqModel::fingerprint);
    Ok((model, mask))
}

fn candidates(method: PersonalizationMethod, general: Option<&SeqModel>, cfg: &PersonalizeConfig) -> Vec<Candidate> {
    let hidden: Vec<usize> = match (method, general) {
        (PersonalizationMethod::TlFt, Some(g)) => vec![g.arch.top_hidden()],
        _ => cfg.hidden_sizes.clone(),
    };
    let mut out = Vec::new();
    for &h in &hidden {
        for &lr in &cfg.learning_rates {
            out.push(Candidate {
                hidden_size: h,
                train: TrainConfig {
                    learning_rate: lr,
                    ..cfg.train.clone()
                },
            });
        }
    }
    out
}

fn fit_method(
    method: PersonalizationMethod,
    general: Option<&SeqModel>,
    vocab: &DomainVocab,
    windows: &[Window],
    cfg: &PersonalizeConfig,
) -> Result<SeqModel> {
    let fit = |cand: &Candidate, tr: &[Window], va: &[Window]| -> Result<SeqModel> {
        let (start, mask) = starting_point(method, general, vocab, cand.hidden_size, cfg.dropout, cand.train.seed)?;
        let tc = TrainConfig {
            freeze_mask: mask,
            ..cand.train.clone()
        };
        Ok(train(&start, tr, va, &tc)?.0)
    };
    let grid = candidates(method, general, cfg);
    let chosen = grid_search_cv(windows, &grid, cfg.cv_folds, fit)?.chosen;
    let n_val = ((windows.len() as f64 * cfg.validation_fraction).round() as usize).min(windows.len() - 1);
    let (tr, va) = windows.split_at(windows.len() - n_val);
    fit(&chosen, tr, va)
}

/// Frozen general stack plus one new LSTM layer and a fresh head.
pub fn personalize_fe(
    general: &SeqModel,
    vocab: &DomainVocab,
    windows: &[Window],
    cfg: &PersonalizeConfig,
) -> Result<SeqModel> {
    transfer(PersonalizationMethod::TlFe, general, vocab, windows, cfg)
}

/// General architecture with the bottom layer frozen and the rest retrained.
pub fn personalize_ft(
    general: &SeqModel,
    vocab: &DomainVocab,
    windows: &[Window],
    cfg: &PersonalizeConfig,
) -> Result<SeqModel> {
    transfer(PersonalizationMethod::TlFt, general, vocab, windows, cfg)
}

fn transfer(
    method: PersonalizationMethod,
    general: &SeqModel,
    vocab: &DomainVocab,
    windows: &[Window],
    cfg: &PersonalizeConfig,
) -> Result<SeqModel> {
    general.check_vocab(vocab)?;
    check_windows(vocab, windows)?;
    if windows.len() < cfg.min_windows {
        warn!(
            "{} windows is below the minimum of {}; reusing the general model",
            windows.len(),
            cfg.min_windows
        );
        return Ok(baseline_reuse(general));
    }
    fit_method(method, Some(general), vocab, windows, cfg)
}

/// The general model relabelled as a personal one.
pub fn baseline_reuse(general: &SeqModel) -> SeqModel {
    let mut m = general.clone();
    m.role = Role::Personalized;
    m.method = Some(PersonalizationMethod::Reuse);
    m.parent = Some(general.fingerprint());
    m
}

/// A single-layer LSTM trained from scratch on one user's windows.
pub fn baseline_personal_lstm(vocab: &DomainVocab, windows: &[Window], cfg: &PersonalizeConfig) -> Result<SeqModel> {
    check_windows(vocab, windows)?;
    if windows.len() < cfg.min_windows {
        return Err(Error::Training(format!(
            "{} windows is below the minimum of {} for a personal model",
            windows.len(),
            cfg.min_windows
        )));
    }
    fit_method(PersonalizationMethod::PersonalLstm, None, vocab, windows, cfg)
}

/// Dispatches on `method`. `PersonalLSTM` ignores `general`.
pub fn personalize(
    method: PersonalizationMethod,
    general: &SeqModel,
    vocab: &DomainVocab,
    windows: &[Window],
    cfg: &PersonalizeConfig,
) -> Result<SeqModel> {
    match method {
        PersonalizationMethod::Reuse => {
            general.check_vocab(vocab)?;
            Ok(baseline_reuse(general))
        }
        PersonalizationMethod::PersonalLstm => {
            general.check_vocab(vocab)?;
            baseline_personal_lstm(vocab, windows, cfg)
        }
        PersonalizationMethod::TlFe => personalize_fe(general, vocab, windows, cfg),
        PersonalizationMethod::TlFt => personalize_ft(general, vocab, windows, cfg),
    }
}

/// Freeze pattern a personal model was trained with.
pub fn freeze_mask(model: &SeqModel) -> Result<Vec<bool>> {
    let n = model.arch.n_lstm_layers();
    match model.method {
        Some(PersonalizationMethod::TlFe) => {
            let mut m = vec![true; n - 1];
            m.extend([false, false]);
            Ok(m)
        }
        Some(PersonalizationMethod::TlFt) => {
            let mut m = vec![false; n + 1];
            m[..n - 1].iter_mut().for_each(|f| *f = true);
            Ok(m)
        }
        Some(PersonalizationMethod::PersonalLstm) => Ok(vec![false; n + 1]),
        Some(PersonalizationMethod::Reuse) => Err(Error::Unsupported("a reused general model cannot be updated".into())),
        None => Err(Error::Unsupported("model is not a personalized model".into())),
    }
}

/// Continues training from the current parameters on the accumulated windows.
///
/// `cfg.freeze_mask` is replaced by the pattern of the model's method.
pub fn update_model(personal: &SeqModel, vocab: &DomainVocab, windows: &[Window], cfg: &TrainConfig) -> Result<SeqModel> {
    let mask = freeze_mask(personal)?;
    personal.check_vocab(vocab)?;
    check_windows(vocab, windows)?;
    let tc = TrainConfig {
        freeze_mask: mask,
        ..cfg.clone()
    };
    let n_val = if windows.len() >= 10 { windows.len() / 10 } else { 0 };
    let (tr, va) = windows.split_at(windows.len() - n_val);
    Ok(train(personal, tr, va, &tc)?.0)
}

/// Checks that `personal` was derived from exactly this general model.
pub fn verify_lineage(personal: &SeqModel, general: &SeqModel) -> Result<()> {
    match &personal.parent {
        Some(p) if *p == general.fingerprint() => Ok(()),
        Some(p) => Err(Error::contract(format!(
            "personal model derives from general model {p}, not {}",
            general.fingerprint()
        ))),
        None => Ok(()),
    }
}
