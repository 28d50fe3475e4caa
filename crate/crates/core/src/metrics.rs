//! Classification metrics: confusion matrix, per-class and macro-averaged
//! precision, recall and F1.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

/// `num / den` with `0/0 := 0`.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl Metrics {
    /// Ratios with a zero denominator are reported as 0.
    pub fn compute(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Metrics> {
        check_dim(truth.len(), predicted.len())?;
        if truth.is_empty() {
            return Err(Error::NoRows);
        }
        if num_classes == 0 {
            return Err(Error::InvalidParameter("metrics need at least one class".into()));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::InvalidParameter(format!(
                    "label {} out of range for {num_classes} classes",
                    t.max(p)
                )));
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        let mut precision = Vec::with_capacity(num_classes);
        let mut recall = Vec::with_capacity(num_classes);
        let mut f1 = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted_c: usize = confusion.iter().map(|row| row[c]).sum();
            precision.push(ratio(tp, predicted_c));
            recall.push(ratio(tp, support));
            f1.push(ratio(2 * tp, support + predicted_c));
        }
        Ok(Metrics {
            accuracy: ratio(correct, truth.len()),
            macro_precision: mean(&precision),
            macro_recall: mean(&recall),
            macro_f1: mean(&f1),
            precision,
            recall,
            f1,
            confusion,
        })
    }

    /// Per-class test counts (row sums of the confusion matrix).
    pub fn support(&self) -> Vec<usize> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    /// Classes for which some metric fell back to `0/0 := 0`.
    pub fn undefined_classes(&self) -> Vec<usize> {
        let n = self.confusion.len();
        (0..n)
            .filter(|&c| {
                let support: usize = self.confusion[c].iter().sum();
                let predicted: usize = self.confusion.iter().map(|r| r[c]).sum();
                support == 0 || predicted == 0
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let y = [0, 1, 2, 2];
        let m = Metrics::compute(&y, &y, 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        assert!(m.undefined_classes().is_empty());
    }

    #[test]
    fn hand_computed_case() {
        let truth = [0, 0, 1, 1];
        let pred = [0, 1, 1, 1];
        let m = Metrics::compute(&truth, &pred, 2).unwrap();
        assert_eq!(m.confusion, vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.precision, vec![1.0, 2.0 / 3.0]);
        assert_eq!(m.recall, vec![0.5, 1.0]);
        assert!((m.f1[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1[1] - 0.8).abs() < 1e-15);
        assert!((m.macro_f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_uses_zero_convention() {
        let m = Metrics::compute(&[1, 1, 1], &[1, 0, 1], 3).unwrap();
        assert_eq!(m.precision[2], 0.0);
        assert_eq!(m.recall[0], 0.0);
        assert_eq!(m.undefined_classes(), vec![0, 2]);
        assert_eq!(m.support(), vec![0, 3, 0]);
    }

    #[test]
    fn permutation_invariance() {
        let truth = [0, 1, 2, 1, 0, 2];
        let pred = [0, 2, 2, 1, 1, 2];
        let a = Metrics::compute(&truth, &pred, 3).unwrap();
        let order = [5, 3, 1, 0, 4, 2];
        let t2: Vec<usize> = order.iter().map(|&i| truth[i]).collect();
        let p2: Vec<usize> = order.iter().map(|&i| pred[i]).collect();
        assert_eq!(a, Metrics::compute(&t2, &p2, 3).unwrap());
    }
}
