//! Binary accuracy under the two sign-threshold conventions, with
//! precision/recall/F1 and per-split reporting.
//!
//! Class-to-binary mapping: under `NonposVsPos` a prediction is positive iff
//! it is the Pos class (2) and a score is positive iff it is > 0; under
//! `NegVsNonneg` the positive side is "non-negative", i.e. prediction not Neg
//! (0) and score >= 0.

use serde::{Deserialize, Serialize};

use crate::error::{CmcError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryMode {
    /// Positive iff score > 0 (SIMS-family convention).
    NonposVsPos,
    /// Negative iff score < 0; the positive side is non-negative
    /// (MOSI-family convention).
    NegVsNonneg,
}

impl BinaryMode {
    fn score_is_positive(self, score: f64) -> bool {
        match self {
            BinaryMode::NonposVsPos => score > 0.0,
            BinaryMode::NegVsNonneg => score >= 0.0,
        }
    }

    fn class_is_positive(self, class: usize) -> bool {
        match self {
            BinaryMode::NonposVsPos => class == 2,
            BinaryMode::NegVsNonneg => class != 0,
        }
    }
}

/// Binary accuracy of predicted classes against ground-truth scores.
pub fn acc2(
    pred_classes: &[usize],
    true_scores: &[f64],
    mode: BinaryMode,
) -> Result<(f64, ConfusionCounts)> {
    if pred_classes.is_empty() {
        return Err(CmcError::Domain("acc2 over an empty sample set".into()));
    }
    if pred_classes.len() != true_scores.len() {
        return Err(CmcError::Shape {
            op: "acc2",
            detail: format!("{} predictions vs {} scores", pred_classes.len(), true_scores.len()),
        });
    }
    let mut counts = ConfusionCounts::default();
    for (&class, &score) in pred_classes.iter().zip(true_scores) {
        match (mode.class_is_positive(class), mode.score_is_positive(score)) {
            (true, true) => counts.tp += 1,
            (false, false) => counts.tn += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
        }
    }
    Ok((counts.accuracy(), counts))
}

#[derive(Clone, Copy, Debug)]
pub struct F1Result {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a zero denominator forced any quantity to 0.
    pub degenerate: bool,
}

/// Precision, recall and their harmonic mean; zero denominators yield 0 with
/// the degenerate flag set.
pub fn f1(counts: &ConfusionCounts) -> F1Result {
    let mut degenerate = false;
    let precision = if counts.tp + counts.fp == 0 {
        degenerate = true;
        0.0
    } else {
        counts.tp as f64 / (counts.tp + counts.fp) as f64
    };
    let recall = if counts.tp + counts.fn_ == 0 {
        degenerate = true;
        0.0
    } else {
        counts.tp as f64 / (counts.tp + counts.fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        degenerate = true;
        0.0
    } else {
        2.0 / (1.0 / precision + 1.0 / recall)
    };
    F1Result { precision, recall, f1, degenerate }
}

/// One split's entry in `metrics.json`; all-metric fields are null when the
/// split is empty.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitReport {
    pub n: usize,
    pub acc2: Option<f64>,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub counts: Option<ConfusionCounts>,
}

pub fn split_report(
    pred_classes: &[usize],
    true_scores: &[f64],
    mode: BinaryMode,
) -> Result<SplitReport> {
    if pred_classes.is_empty() {
        return Ok(SplitReport { n: 0, acc2: None, f1: None, precision: None, recall: None, counts: None });
    }
    let (accuracy, counts) = acc2(pred_classes, true_scores, mode)?;
    let f = f1(&counts);
    Ok(SplitReport {
        n: counts.total(),
        acc2: Some(accuracy),
        f1: Some(f.f1),
        precision: Some(f.precision),
        recall: Some(f.recall),
        counts: Some(counts),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_from_counts() {
        let counts = ConfusionCounts { tp: 3, tn: 2, fp: 1, fn_: 4 };
        assert_eq!(counts.accuracy(), 0.5);
    }

    #[test]
    fn perfect_predictor() {
        let preds = vec![2usize, 0, 2, 1];
        let scores = vec![0.5, -0.5, 0.1, -0.2];
        let (acc, counts) = acc2(&preds, &scores, BinaryMode::NonposVsPos).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(counts.fp, 0);
        assert_eq!(counts.fn_, 0);
    }

    #[test]
    fn hand_mapped_three_sample_case() {
        // classes [2,0,1], scores [0.2,-0.1,0] under nonpos-vs-pos:
        // truth [pos, nonpos, nonpos], preds [pos, nonpos, nonpos]
        let (acc, _) = acc2(&[2, 0, 1], &[0.2, -0.1, 0.0], BinaryMode::NonposVsPos).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn mosi_convention_counts_zero_as_nonnegative() {
        // score 0 is positive-side under neg-vs-nonneg
        let (acc, _) = acc2(&[1], &[0.0], BinaryMode::NegVsNonneg).unwrap();
        assert_eq!(acc, 1.0);
        let (acc, _) = acc2(&[0], &[0.0], BinaryMode::NegVsNonneg).unwrap();
        assert_eq!(acc, 0.0);
    }

    #[test]
    fn empty_set_is_a_domain_error() {
        assert!(matches!(
            acc2(&[], &[], BinaryMode::NonposVsPos),
            Err(CmcError::Domain(_))
        ));
    }

    #[test]
    fn f1_worked_example() {
        let counts = ConfusionCounts { tp: 3, tn: 0, fp: 1, fn_: 4 };
        let r = f1(&counts);
        assert!((r.precision - 0.75).abs() < 1e-12);
        assert!((r.recall - 3.0 / 7.0).abs() < 1e-12);
        assert!((r.f1 - 0.545455).abs() < 1e-6);
        assert!(!r.degenerate);
    }

    #[test]
    fn balanced_f1_is_half() {
        // P = R = 0.5
        let counts = ConfusionCounts { tp: 2, tn: 0, fp: 2, fn_: 2 };
        let r = f1(&counts);
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 0.5);
        assert!((r.f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_tp_degenerates_to_zero() {
        let counts = ConfusionCounts { tp: 0, tn: 5, fp: 0, fn_: 3 };
        let r = f1(&counts);
        assert_eq!(r.f1, 0.0);
        assert!(r.degenerate);
    }

    #[test]
    fn harmonic_identity_holds_when_defined() {
        for tp in 1..6usize {
            for fp in 0..4usize {
                for fn_ in 0..4usize {
                    let counts = ConfusionCounts { tp, tn: 2, fp, fn_ };
                    let r = f1(&counts);
                    let direct = 2.0 * r.precision * r.recall / (r.precision + r.recall);
                    assert!((r.f1 - direct).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn acc2_is_permutation_invariant() {
        let preds = vec![2usize, 0, 1, 2, 0];
        let scores = vec![0.5, -0.5, 0.0, -0.1, 0.3];
        let (base, _) = acc2(&preds, &scores, BinaryMode::NonposVsPos).unwrap();
        let perm = [4usize, 2, 0, 3, 1];
        let p2: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
        let s2: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let (shuffled, _) = acc2(&p2, &s2, BinaryMode::NonposVsPos).unwrap();
        assert_eq!(base, shuffled);
    }

    #[test]
    fn neg_and_neu_predictions_are_interchangeable_under_nonpos_mode() {
        let preds = vec![0usize, 1, 2, 0, 1, 2];
        let scores = vec![-0.5, 0.0, 0.4, 0.2, -0.3, -0.2];
        let merged: Vec<usize> = preds.iter().map(|&c| if c == 2 { 2 } else { 0 }).collect();
        let (a, _) = acc2(&preds, &scores, BinaryMode::NonposVsPos).unwrap();
        let (b, _) = acc2(&merged, &scores, BinaryMode::NonposVsPos).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_split_reports_null_metrics() {
        let report = split_report(&[], &[], BinaryMode::NonposVsPos).unwrap();
        assert_eq!(report.n, 0);
        assert!(report.acc2.is_none());
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"acc2\":null"));
    }
}
