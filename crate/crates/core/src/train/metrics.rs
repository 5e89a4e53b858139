use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classification quality derived from a confusion matrix whose rows are
/// true classes and columns are predicted classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<u64>>,
    pub acc: f64,
    /// Support-weighted F1.
    pub wf1: f64,
    /// Support-weighted precision.
    pub wp: f64,
    /// Macro-averaged recall.
    pub r: f64,
}

/// `confusion[true][pred]` counts.
pub fn confusion_matrix(truth: &[usize], predicted: &[usize], num_labels: usize) -> Result<Vec<Vec<u64>>> {
    if truth.len() != predicted.len() {
        return Err(Error::Dimension(format!(
            "{} labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut m = vec![vec![0u64; num_labels]; num_labels];
    for (&t, &p) in truth.iter().zip(predicted) {
        for y in [t, p] {
            if y >= num_labels {
                return Err(Error::Label { label: y, num_labels });
            }
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn compute_metrics(confusion: &[Vec<u64>]) -> Result<MetricsReport> {
    let n = confusion.len();
    if n == 0 || confusion.iter().any(|row| row.len() != n) {
        return Err(Error::Dimension("confusion matrix must be square and non-empty".into()));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Degenerate("confusion matrix has no samples".into()));
    }
    let total_f = total as f64;
    let trace: u64 = (0..n).map(|c| confusion[c][c]).sum();
    let (mut wf1, mut wp, mut r) = (0.0, 0.0, 0.0);
    for c in 0..n {
        let tp = confusion[c][c] as f64;
        let support = confusion[c].iter().sum::<u64>() as f64;
        let predicted = (0..n).map(|t| confusion[t][c]).sum::<u64>() as f64;
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        let weight = support / total_f;
        wf1 += weight * f1;
        wp += weight * precision;
        r += recall;
    }
    Ok(MetricsReport {
        confusion: confusion.to_vec(),
        acc: trace as f64 / total_f,
        wf1,
        wp,
        r: r / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_example() {
        let m = compute_metrics(&[vec![5, 1], vec![2, 4]]).unwrap();
        assert_eq!(m.acc, 0.75);
        // P = (5/7, 4/5), R = (5/6, 4/6), supports 6 and 6.
        let (p0, p1, r0, r1) = (5.0 / 7.0, 0.8, 5.0 / 6.0, 4.0 / 6.0);
        let f = |p: f64, r: f64| 2.0 * p * r / (p + r);
        assert!((m.wp - 0.5 * (p0 + p1)).abs() < 1e-12);
        assert!((m.r - 0.5 * (r0 + r1)).abs() < 1e-12);
        assert!((m.wf1 - 0.5 * (f(p0, r0) + f(p1, r1))).abs() < 1e-12);
    }

    #[test]
    fn diagonal_is_perfect() {
        let m = compute_metrics(&[vec![3, 0, 0], vec![0, 1, 0], vec![0, 0, 7]]).unwrap();
        assert_eq!((m.acc, m.wf1, m.wp, m.r), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_predictor() {
        let m = compute_metrics(&[vec![5, 0, 0, 0], vec![5, 0, 0, 0], vec![5, 0, 0, 0], vec![5, 0, 0, 0]]).unwrap();
        assert_eq!(m.acc, 0.25);
        assert_eq!(m.r, 0.25);
        assert_eq!(m.wp, 0.25 * 0.25);
    }

    #[test]
    fn unpredicted_class_has_zero_precision() {
        let m = compute_metrics(&[vec![2, 0], vec![2, 0]]).unwrap();
        assert_eq!(m.wp, 0.5 * 0.5);
        assert!(m.wf1.is_finite());
    }

    #[test]
    fn empty_and_ragged_rejected() {
        assert!(matches!(compute_metrics(&[vec![0, 0], vec![0, 0]]), Err(Error::Degenerate(_))));
        assert!(compute_metrics(&[vec![1, 0], vec![1]]).is_err());
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn confusion_counts() {
        let m = confusion_matrix(&[0, 1, 1, 2], &[0, 2, 1, 2], 3).unwrap();
        assert_eq!(m, vec![vec![1, 0, 0], vec![0, 1, 1], vec![0, 0, 1]]);
        assert!(confusion_matrix(&[0, 3], &[0, 0], 3).is_err());
        assert!(confusion_matrix(&[0], &[0, 0], 3).is_err());
    }
}
