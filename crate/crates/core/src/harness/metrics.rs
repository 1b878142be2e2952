//! Service and privacy metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blackbox::BlackBoxHandle;
use crate::error::{Error, Result};
use crate::seqnet::{argsort_desc, SeqModel};
use crate::trace::{EncodedStep, Window};

/// Anything that ranks next-location labels.
pub trait Ranker {
    fn top_labels(&self, pairs: &[(EncodedStep, EncodedStep)], k: usize) -> Vec<Vec<usize>>;
}

impl Ranker for SeqModel {
    fn top_labels(&self, pairs: &[(EncodedStep, EncodedStep)], k: usize) -> Vec<Vec<usize>> {
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
}

impl Ranker for BlackBoxHandle {
    fn top_labels(&self, pairs: &[(EncodedStep, EncodedStep)], k: usize) -> Vec<Vec<usize>> {
        self.ranked(pairs, k)
    }
}

/// Per-window hit flags for top-`k`.
pub fn topk_hits(ranker: &dyn Ranker, windows: &[Window], k: usize) -> Vec<bool> {
    let pairs: Vec<_> = windows.iter().map(|w| (w.prev2, w.prev1)).collect();
    ranker
        .top_labels(&pairs, k)
        .iter()
        .zip(windows)
        .map(|(top, w)| top.contains(&w.label))
        .collect()
}

/// Percentage of windows whose label is among the top `k` predictions.
pub fn topk_accuracy(ranker: &dyn Ranker, windows: &[Window], k: usize) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Undefined("accuracy over no windows".into()));
    }
    if k == 0 {
        return Err(Error::input("k must be at least 1"));
    }
    let hits = topk_hits(ranker, windows, k).into_iter().filter(|&h| h).count();
    Ok(100.0 * hits as f64 / windows.len() as f64)
}

/// Relative drop `(undefended - defended) / undefended * 100`.
pub fn leakage_reduction(undefended: f64, defended: f64) -> Result<f64> {
    if undefended == 0.0 {
        return Err(Error::Undefined("no leakage to reduce".into()));
    }
    Ok((undefended - defended) / undefended * 100.0)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::input("correlation needs two equally long samples of at least 3"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation with a constant sample".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Two-sided permutation p-value of Pearson's r.
pub fn permutation_p_value(x: &[f64], y: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    let observed = pearson(x, y)?.abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = y.to_vec();
    let mut extreme = 0usize;
    for _ in 0..resamples {
        shuffled.shuffle(&mut rng);
        if pearson(x, &shuffled)?.abs() >= observed - 1e-12 {
            extreme += 1;
        }
    }
    Ok((extreme + 1) as f64 / (resamples + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Correlation {
    pub n: usize,
    pub r: f64,
    pub p_value: f64,
}

pub fn correlate(x: &[f64], y: &[f64], resamples: usize, seed: u64) -> Result<Correlation> {
    Ok(Correlation {
        n: x.len(),
        r: pearson(x, y)?,
        p_value: permutation_p_value(x, y, resamples, seed)?,
    })
}
