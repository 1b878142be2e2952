//! Time-ordered cross-validation and grid selection.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::model::SeqModel;
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::trace::Window;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub hidden_size: usize,
    pub train: TrainConfig,
}

/// Forward-chaining folds over `n` time-ordered windows.
///
/// The first `ceil(n / (k + 1))` windows only ever train. The rest is cut into
/// `k` consecutive validation blocks; fold `i` trains on everything before its block.
pub fn folds(n: usize, k: usize) -> Result<Vec<(Range<usize>, Range<usize>)>> {
    if k < 1 {
        return Err(Error::config("need at least one fold"));
    }
    if n < k + 1 {
        return Err(Error::Fold(format!("{n} windows cannot form {k} time-ordered folds")));
    }
    let start0 = n.div_ceil(k + 1);
    let step = (n - start0) / k;
    if step == 0 {
        return Err(Error::Fold(format!("{n} windows leave empty validation blocks for {k} folds")));
    }
    Ok((0..k)
        .map(|i| {
            let lo = start0 + i * step;
            let hi = if i + 1 == k { n } else { lo + step };
            (0..lo, lo..hi)
        })
        .collect())
}

/// Mean fold score of each candidate plus the chosen one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub chosen: Candidate,
    pub scores: Vec<f64>,
}

/// Picks the candidate with the highest mean validation top-1 accuracy.
///
/// Ties go to the smaller hidden size, then the smaller learning rate. `fit`
/// trains one candidate on a training split with the given validation split.
/// A single candidate is returned without fitting anything.
pub fn grid_search_cv<F>(windows: &[Window], candidates: &[Candidate], k: usize, mut fit: F) -> Result<CvOutcome>
where
    F: FnMut(&Candidate, &[Window], &[Window]) -> Result<SeqModel>,
{
    match candidates {
        [] => Err(Error::config("empty hyperparameter grid")),
        [only] => Ok(CvOutcome {
            chosen: only.clone(),
            scores: vec![f64::NAN],
        }),
        _ => {
            let splits = folds(windows.len(), k)?;
            let mut scores = Vec::with_capacity(candidates.len());
            for cand in candidates {
                let mut total = 0.0;
                for (tr, va) in &splits {
                    let model = fit(cand, &windows[tr.clone()], &windows[va.clone()])?;
                    total += top1(&model, &windows[va.clone()]);
                }
                scores.push(total / splits.len() as f64);
            }
            let best = (0..candidates.len())
                .max_by(|&a, &b| {
                    scores[a]
                        .total_cmp(&scores[b])
                        .then(candidates[b].hidden_size.cmp(&candidates[a].hidden_size))
                        .then(
                            candidates[b]
                                .train
                                .learning_rate
                                .total_cmp(&candidates[a].train.learning_rate),
                        )
                })
                .expect("non-empty grid");
            Ok(CvOutcome {
                chosen: candidates[best].clone(),
                scores,
            })
        }
    }
}

fn top1(model: &SeqModel, windows: &[Window]) -> f64 {
    let pairs: Vec<_> = windows.iter().map(|w| (w.prev2, w.prev1)).collect();
    let logits = model.logits(&pairs);
    let hits = logits
        .rows()
        .into_iter()
        .zip(windows)
        .filter(|(row, w)| {
            let row = row.as_slice().expect("standard layout");
            super::softmax::argsort_desc(row)[0] == w.label
        })
        .count();
    hits as f64 / windows.len() as f64
}
