//! Temperature-scaled softmax and ranking helpers.

use ndarray::Array2;

use crate::error::{Error, Result};

/// `p_i = exp(z_i / T) / sum_j exp(z_j / T)`, computed with the max shifted out.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|&z| (z - max) / temperature).collect();
    let lse = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}

pub(crate) fn softmax_rows(logits: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let p = softmax_with_temperature(row.as_slice().expect("standard layout"), temperature);
        row.iter_mut().zip(p).for_each(|(o, v)| *o = v);
    }
    out
}

/// Indices sorted by descending value; equal values keep ascending index order.
pub fn argsort_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// The `k` most probable indices, descending, ties to the lower index.
pub fn topk(probabilities: &[f64], k: usize) -> Result<Vec<usize>> {
    if k < 1 || k > probabilities.len() {
        return Err(Error::input(format!(
            "k = {k} outside [1, {}]",
            probabilities.len()
        )));
    }
    let mut idx = argsort_desc(probabilities);
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn reference_values() {
        let p = softmax_with_temperature(&[0.0, 0.0], 3.0);
        assert_eq!(p, vec![0.5, 0.5]);
        // 1 / (1 + e^-2) and its complement.
        let p = softmax_with_temperature(&[2.0, 0.0], 1.0);
        assert_abs_diff_eq!(p[0], 0.880_797_077_977_882_3, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.119_202_922_022_117_55, epsilon = 1e-15);
        // e^-20 / (1 + e^-20)
        let p = softmax_with_temperature(&[2.0, 0.0], 0.1);
        assert_abs_diff_eq!(p[1], 2.061_153_618_190_203_3e-9, epsilon = 1e-22);
        assert_abs_diff_eq!(p[0], 1.0 - 2.061_153_618_190_203_3e-9, epsilon = 1e-15);
    }

    #[test]
    fn topk_rules() {
        assert_eq!(topk(&[0.5, 0.3, 0.2], 2).unwrap(), vec![0, 1]);
        assert_eq!(topk(&[0.25; 4], 1).unwrap(), vec![0]);
        let mut all = topk(&[0.1, 0.4, 0.2, 0.3], 4).unwrap();
        assert_eq!(all, vec![1, 3, 2, 0]);
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(topk(&[0.5, 0.5], 0).is_err());
        assert!(topk(&[0.5, 0.5], 3).is_err());
    }

    #[test]
    fn sharpening_is_monotone() {
        let z = [1.3, 0.2, -0.7, 1.1];
        let mut last = 0.0;
        for t in [10.0, 2.0, 1.0, 0.5, 0.1, 0.05, 0.01] {
            let m = softmax_with_temperature(&z, t)[0];
            assert!(m > last);
            last = m;
        }
        assert!(last > 1.0 - 1e-8);
    }

    proptest! {
        #[test]
        fn log_softmax_matches(z in proptest::collection::vec(-4.0f64..4.0, 2..16), t in 0.05f64..10.0) {
            let p = softmax_with_temperature(&z, t);
            let lp = log_softmax_with_temperature(&z, t);
            for (a, b) in p.iter().zip(lp) {
                prop_assert!((a.ln() - b).abs() < 1e-9);
            }
        }
    }
}
