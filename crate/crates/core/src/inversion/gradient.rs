//! Input reconstruction by gradient descent on softened one-hot blocks.
//!
//! Needs input gradients, so it runs against the model itself rather than a
//! query-only handle.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use super::enumerate::tie_rng;
use super::report::{RankedLocations, WindowAttack};
use super::{AdversaryKind, AttackContext, AttackTarget, Prior};
use crate::error::{Error, Result};
use crate::seqnet::{loss_and_grads_dense, SeqModel};
use crate::trace::{day_of_week, EncodedStep, DURATION_BINS, ENTRY_SLOTS, TIME_FEATURE_WIDTH};

/// Differentiable access to `-ln conf(label)` with respect to the dense inputs.
pub trait InputGradient: Sync {
    fn n_locations(&self) -> usize;

    /// Summed negative log-confidence of `labels` over the rows of `x2`/`x1`
    /// and its gradients with respect to both inputs.
    fn nll_input_grad(&self, x2: &Array2<f64>, x1: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>, Array2<f64>);
}

/// A model evaluated at an inference temperature.
#[derive(Debug, Clone, Copy)]
pub struct WhiteBox<'a> {
    pub model: &'a SeqModel,
    pub temperature: f64,
}

impl InputGradient for WhiteBox<'_> {
    fn n_locations(&self) -> usize {
        self.model.n_locations()
    }

    fn nll_input_grad(&self, x2: &Array2<f64>, x1: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>, Array2<f64>) {
        let b = labels.len() as f64;
        let (loss, grads) =
            loss_and_grads_dense(self.model, [x2.clone(), x1.clone()], labels, self.temperature, true, 0, None);
        let [g2, g1] = grads.inputs.expect("input gradients requested");
        (loss * b, g2 * b, g1 * b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GradientInit {
    /// All blocks start uniform.
    Uniform,
    /// Start from these steps, one per unknown step.
    Given(Vec<EncodedStep>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Temperature of the softmax that maps each block onto the simplex.
    pub soften_temperature: f64,
    pub init: GradientInit,
}

impl Default for GradientConfig {
    fn default() -> Self {
        GradientConfig {
            steps: 100,
            step_size: 0.5,
            soften_temperature: 1.0,
            init: GradientInit::Uniform,
        }
    }
}

const BLOCKS: [usize; 3] = [0, 1, 2];

fn block_len(block: usize, n_loc: usize) -> usize {
    [n_loc, ENTRY_SLOTS, DURATION_BINS][block]
}

fn block_offset(block: usize, n_loc: usize) -> usize {
    [0, n_loc, n_loc + ENTRY_SLOTS][block]
}

fn soft(u: &Array1<f64>, tau: f64) -> Array1<f64> {
    let v = crate::seqnet::softmax_with_temperature(u.as_slice().expect("contiguous"), tau);
    Array1::from(v)
}

fn argmax(v: &Array1<f64>) -> usize {
    crate::seqnet::argsort_desc(v.as_slice().expect("contiguous"))[0]
}

/// State of one unknown step: an unconstrained vector per block.
struct SoftStep {
    blocks: [Array1<f64>; 3],
    day: usize,
}

impl SoftStep {
    fn new(n_loc: usize, day: usize, init: Option<&EncodedStep>) -> Self {
        let mut blocks = BLOCKS.map(|b| Array1::zeros(block_len(b, n_loc)));
        if let Some(st) = init {
            blocks[0][st.location] = 1.0;
            blocks[1][st.slot] = 1.0;
            blocks[2][st.duration_bin] = 1.0;
        }
        SoftStep { blocks, day }
    }

    fn dense(&self, n_loc: usize, tau: f64) -> (Array1<f64>, [Array1<f64>; 3]) {
        let q = [0, 1, 2].map(|b| soft(&self.blocks[b], tau));
        let mut x = Array1::zeros(n_loc + TIME_FEATURE_WIDTH);
        for b in BLOCKS {
            let o = block_offset(b, n_loc);
            x.slice_mut(s![o..o + q[b].len()]).assign(&q[b]);
        }
        x[n_loc + ENTRY_SLOTS + DURATION_BINS + self.day] = 1.0;
        (x, q)
    }

    fn discretize(&self) -> EncodedStep {
        EncodedStep {
            location: argmax(&self.blocks[0]),
            slot: argmax(&self.blocks[1]),
            duration_bin: argmax(&self.blocks[2]),
            day: self.day,
        }
    }
}

/// Result of one optimization: the discretized steps.
pub(crate) struct Reconstruction {
    pub steps: Vec<EncodedStep>,
    pub evaluations: u64,
    pub failed: bool,
}

pub(crate) fn reconstruct(
    model: &dyn InputGradient,
    kind: AdversaryKind,
    known: (EncodedStep, EncodedStep),
    obs_day: usize,
    label: usize,
    prior: &Prior,
    cfg: &GradientConfig,
) -> Result<Reconstruction> {
    let n_loc = model.n_locations();
    let unknown = kind.unknown_steps();
    let tau = cfg.soften_temperature;
    if !(tau > 0.0) {
        return Err(Error::config("soften temperature must be positive"));
    }
    let inits: Vec<Option<&EncodedStep>> = match &cfg.init {
        GradientInit::Uniform => vec![None; unknown.len()],
        GradientInit::Given(v) if v.len() == unknown.len() => v.iter().map(Some).collect(),
        GradientInit::Given(v) => {
            return Err(Error::config(format!(
                "{} initial steps given for {} unknown steps",
                v.len(),
                unknown.len()
            )))
        }
    };
    let day = match kind {
        AdversaryKind::A1 => known.0.day,
        AdversaryKind::A2 => known.1.day,
        AdversaryKind::A3 => obs_day,
    };
    let mut soft_steps: Vec<SoftStep> = unknown
        .iter()
        .zip(&inits)
        .map(|(_, init)| SoftStep::new(n_loc, day, *init))
        .collect();
    let p = Array1::from(prior.values.clone());
    let fixed = [known.0.to_dense(n_loc), known.1.to_dense(n_loc)];
    let mut failed = false;
    let mut evaluations = 0;

    for _ in 0..cfg.steps {
        let mut x = [Array1::from(fixed[0].clone()), Array1::from(fixed[1].clone())];
        let mut qs = Vec::with_capacity(unknown.len());
        for (ss, &s) in soft_steps.iter().zip(unknown) {
            let (dense, q) = ss.dense(n_loc, tau);
            x[s] = dense;
            qs.push(q);
        }
        let [x2, x1] = x.map(|v| v.insert_axis(ndarray::Axis(0)));
        let (nll, g2, g1) = model.nll_input_grad(&x2, &x1, &[label]);
        evaluations += 1;
        let mut loss = nll;
        let gx = [g2.row(0).to_owned(), g1.row(0).to_owned()];
        for ((ss, &s), q) in soft_steps.iter_mut().zip(unknown).zip(&qs) {
            let mass = q[0].dot(&p);
            loss -= mass.ln();
            for b in BLOCKS {
                let o = block_offset(b, n_loc);
                let mut g = gx[s].slice(s![o..o + q[b].len()]).to_owned();
                if b == 0 {
                    g -= &(&p / mass);
                }
                let inner = g.dot(&q[b]);
                let du = (&g - inner) * &q[b] / tau;
                ss.blocks[b].scaled_add(-cfg.step_size, &du);
            }
        }
        if !loss.is_finite() || soft_steps.iter().any(|ss| ss.blocks.iter().any(|b| b.iter().any(|v| !v.is_finite()))) {
            failed = true;
            break;
        }
    }
    Ok(Reconstruction {
        steps: soft_steps.iter().map(SoftStep::discretize).collect(),
        evaluations,
        failed,
    })
}

/// Runs one optimization per prior in `ctx.priors`.
///
/// The result is the discretized reconstruction, a single location per unknown
/// step. It is ranked first and the remaining locations follow in tie order,
/// since the optimization says nothing about runners-up. A diverged run
/// reports a random ranking.
pub fn attack_gradient(
    ctx: &AttackContext,
    model: &dyn InputGradient,
    target: &AttackTarget,
    window: usize,
    cfg: &GradientConfig,
) -> Result<Vec<WindowAttack>> {
    let kind = ctx.adversary.kind;
    let truth = target.truth(kind, ctx.vocab)?;
    let known = (
        ctx.vocab.encode_session(&target.prev2)?,
        ctx.vocab.encode_session(&target.prev1)?,
    );
    let obs_day = day_of_week(target.label_entry) as usize;
    ctx.priors
        .iter()
        .map(|prior| {
            let rec = reconstruct(model, kind, known, obs_day, target.label, prior, cfg)?;
            log::debug!("window {window}, {} prior: reconstructed {:?}", prior.mode.name(), rec.steps);
            let rankings = (0..truth.len())
                .map(|si| {
                    let mut rng = tie_rng(ctx.tie_seed, window, si);
                    let mut scores = vec![0.0; ctx.vocab.len()];
                    if !rec.failed {
                        scores[rec.steps[si].location] = 1.0;
                    }
                    RankedLocations::from_scores(&scores, &mut rng)
                })
                .collect();
            Ok(WindowAttack {
                window,
                truth: truth.clone(),
                rankings,
                queries: rec.evaluations,
                failed: rec.failed,
            })
        })
        .collect()
}
