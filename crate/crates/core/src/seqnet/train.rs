//! Mini-batch training with AdamW, per-layer freezing and early stopping.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lstm::dropout_mask;
use super::model::{dense_inputs, Gradients, SeqModel};
use super::softmax::softmax_rows;
use crate::error::{Error, Result};
use crate::trace::Window;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// One flag per layer, LSTM layers bottom first and the head last. Empty means nothing frozen.
    #[serde(default)]
    pub freeze_mask: Vec<bool>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-6,
            batch_size: 128,
            max_epochs: 200,
            patience: 10,
            freeze_mask: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !self.freeze_mask.is_empty() && self.freeze_mask.len() != n_layers {
            return Err(Error::config(format!(
                "freeze mask has {} entries for a model with {n_layers} layers",
                self.freeze_mask.len()
            )));
        }
        if !self.freeze_mask.is_empty() && self.freeze_mask.iter().all(|&f| f) {
            return Err(Error::config("every layer is frozen; nothing to train"));
        }
        Ok(())
    }

    pub fn is_frozen(&self, layer: usize) -> bool {
        self.freeze_mask.get(layer).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub initial_val_loss: f64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl History {
    pub fn epochs_run(&self) -> usize {
        self.train_loss.len()
    }
}

/// Which gradients [`loss_and_grads`] should return.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Parameters,
    Inputs,
}

/// Mean cross-entropy at temperature 1 and its gradient (no dropout).
pub fn loss_and_grads(model: &SeqModel, batch: &[Window], wrt: GradTarget) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let inputs = dense_inputs(batch, model.n_locations());
    let labels: Vec<usize> = batch.iter().map(|w| w.label).collect();
    Ok(loss_and_grads_dense(model, inputs, &labels, 1.0, wrt == GradTarget::Inputs, 0, None))
}

/// Dense-input variant used by training and by the input-reconstruction attack.
pub(crate) fn loss_and_grads_dense(
    model: &SeqModel,
    inputs: [Array2<f64>; 2],
    labels: &[usize],
    temperature: f64,
    need_inputs: bool,
    first_trainable: usize,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> (f64, Gradients) {
    let cache = model.forward_cached(inputs, dropout_rng);
    let probs = softmax_rows(&cache.logits, temperature);
    let b = labels.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = probs;
    for (r, &y) in labels.iter().enumerate() {
        loss -= dlogits[[r, y]].max(f64::MIN_POSITIVE).ln();
        dlogits[[r, y]] -= 1.0;
    }
    dlogits /= b * temperature;
    let grads = model.backward(&cache, &dlogits, first_trainable, need_inputs);
    (loss / b, grads)
}

/// Mean cross-entropy without dropout.
pub fn mean_loss(model: &SeqModel, windows: &[Window]) -> f64 {
    if windows.is_empty() {
        return f64::NAN;
    }
    let probs = softmax_rows(
        &model.logits(&windows.iter().map(|w| (w.prev2, w.prev1)).collect::<Vec<_>>()),
        1.0,
    );
    -windows
        .iter()
        .enumerate()
        .map(|(r, w)| probs[[r, w.label]].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / windows.len() as f64
}

struct AdamW {
    first: Vec<Vec<Vec<f64>>>,
    second: Vec<Vec<Vec<f64>>>,
    step: i32,
}

impl AdamW {
    fn new(model: &SeqModel) -> Self {
        let zeros = |i| {
            model
                .params
                .layer_slices(i)
                .iter()
                .map(|s| vec![0.0; s.len()])
                .collect::<Vec<_>>()
        };
        let n = model.params.n_layers();
        AdamW {
            first: (0..n).map(zeros).collect(),
            second: (0..n).map(zeros).collect(),
            step: 0,
        }
    }

    fn update(&mut self, model: &mut SeqModel, grads: &Gradients, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        let lr = cfg.learning_rate;
        for layer in 0..model.params.n_layers() {
            if cfg.is_frozen(layer) {
                continue;
            }
            let g = grads.params.layer_slices(layer);
            for (k, p) in model.params.layer_slices_mut(layer).into_iter().enumerate() {
                let m = &mut self.first[layer][k];
                let v = &mut self.second[layer][k];
                for j in 0..p.len() {
                    let gj = g[k][j];
                    m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                    v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                    p[j] *= 1.0 - lr * cfg.weight_decay;
                    p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let probs = softmax_rows(logits, 1.0);
    -labels
        .iter()
        .enumerate()
        .map(|(r, &y)| probs[[r, y]].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / labels.len() as f64
}

/// Cached outputs of a frozen prefix, one matrix per time step.
struct Features {
    train: [Array2<f64>; 2],
    val: Option<[Array2<f64>; 2]>,
    /// Dropout applied where the prefix hands over to the trainable part.
    boundary_dropout: f64,
}

/// Trains `model` and returns the parameters of the best validation epoch.
///
/// With no validation windows the training loss drives early stopping.
/// Frozen layers are never written. A frozen bottom stack acts as a fixed
/// feature extractor: it runs once in inference mode and only the layers
/// above it are iterated.
pub fn train(
    model: &SeqModel,
    train_windows: &[Window],
    val_windows: &[Window],
    cfg: &TrainConfig,
) -> Result<(SeqModel, History)> {
    let n_layers = model.params.n_layers();
    cfg.validate(n_layers)?;
    if cfg.max_epochs > 0 && train_windows.is_empty() {
        return Err(Error::Training("no training windows".into()));
    }
    let first_trainable = (0..n_layers).find(|&l| !cfg.is_frozen(l)).unwrap_or(0);
    if first_trainable == 0 || cfg.max_epochs == 0 {
        return fit(model.clone(), train_windows, val_windows, None, cfg);
    }
    let n_loc = model.n_locations();
    let n_lstm = model.params.lstm.len();
    let features = Features {
        train: model.prefix_features(dense_inputs(train_windows, n_loc), first_trainable),
        val: (!val_windows.is_empty())
            .then(|| model.prefix_features(dense_inputs(val_windows, n_loc), first_trainable)),
        boundary_dropout: if first_trainable < n_lstm || model.arch.output_dropout {
            model.arch.dropout
        } else {
            0.0
        },
    };
    let sub_cfg = TrainConfig {
        freeze_mask: cfg.freeze_mask[first_trainable..].to_vec(),
        ..cfg.clone()
    };
    let (trained, history) = fit(
        model.suffix(first_trainable),
        train_windows,
        val_windows,
        Some(&features),
        &sub_cfg,
    )?;
    let mut out = model.clone();
    out.params.lstm.truncate(first_trainable);
    out.params.lstm.extend(trained.params.lstm);
    out.params.head = trained.params.head;
    Ok((out, history))
}

fn fit(
    mut model: SeqModel,
    train_windows: &[Window],
    val_windows: &[Window],
    features: Option<&Features>,
    cfg: &TrainConfig,
) -> Result<(SeqModel, History)> {
    let n_layers = model.params.n_layers();
    let train_labels: Vec<usize> = train_windows.iter().map(|w| w.label).collect();
    let val_labels: Vec<usize> = val_windows.iter().map(|w| w.label).collect();
    let monitor = |m: &SeqModel| match features {
        None if val_windows.is_empty() => mean_loss(m, train_windows),
        None => mean_loss(m, val_windows),
        Some(f) => match &f.val {
            Some(v) => cross_entropy(&m.logits_dense(v.clone()), &val_labels),
            None => cross_entropy(&m.logits_dense(f.train.clone()), &train_labels),
        },
    };
    let mut history = History {
        initial_val_loss: if train_windows.is_empty() { f64::NAN } else { monitor(&model) },
        ..History::default()
    };
    if cfg.max_epochs == 0 {
        return Ok((model, history));
    }
    let first_trainable = (0..n_layers).find(|&l| !cfg.is_frozen(l)).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model);
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut best = (history.initial_val_loss, model.params.clone());
    let mut stale = 0usize;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let inputs = match features {
                None => {
                    let batch: Vec<Window> = chunk.iter().map(|&i| train_windows[i]).collect();
                    dense_inputs(&batch, model.n_locations())
                }
                Some(f) => {
                    let mut x = [f.train[0].select(Axis(0), chunk), f.train[1].select(Axis(0), chunk)];
                    if f.boundary_dropout > 0.0 {
                        for xt in x.iter_mut() {
                            *xt *= &dropout_mask(xt.nrows(), xt.ncols(), f.boundary_dropout, &mut rng);
                        }
                    }
                    x
                }
            };
            let (loss, grads) = loss_and_grads_dense(
                &model,
                inputs,
                &labels,
                1.0,
                false,
                first_trainable,
                Some(&mut rng),
            );
            if !loss.is_finite() {
                return Err(Error::Training(format!("loss diverged at epoch {epoch}")));
            }
            epoch_loss += loss * chunk.len() as f64;
            opt.update(&mut model, &grads, cfg);
        }
        history.train_loss.push(epoch_loss / train_windows.len() as f64);
        let val = monitor(&model);
        history.val_loss.push(val);
        if val < best.0 || best.0.is_nan() {
            best = (val, model.params.clone());
            history.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    model.params = best.1;
    Ok((model, history))
}
