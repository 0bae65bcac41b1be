//! Segmentation and classification metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Pixel-level report for one map or an aggregate of maps.
///
/// Conventions: precision is 0 when nothing is predicted positive, recall is 0
/// when the ground truth is empty, and when both prediction and ground truth
/// are empty every overlap score is 1.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricReport {
    pub mae: f64,
    pub iou: f64,
    /// Overlapping ratio `|P ∩ G| / |P ∪ G|`.
    pub or: f64,
    /// Overlapping ratio relative to the ground truth, `|P ∩ G| / |G|`.
    pub or_gt: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl MetricReport {
    fn from_counts(mae: f64, tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let empty = tp + fp + fn_ == 0;
        let (iou, precision, recall, or_gt) = if empty {
            (1.0, 1.0, 1.0, 1.0)
        } else {
            (ratio(tp, tp + fp + fn_), ratio(tp, tp + fp), ratio(tp, tp + fn_), ratio(tp, tp + fn_))
        };
        let f_measure = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        MetricReport { mae, iou, or: iou, or_gt, precision, recall, f_measure, tp, fp, fn_, tn }
    }

    /// Mean of per-map scores; pixel counts are summed.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::invalid("metrics", "no reports to aggregate"));
        }
        let k = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        Ok(MetricReport {
            mae: avg(|r| r.mae),
            iou: avg(|r| r.iou),
            or: avg(|r| r.or),
            or_gt: avg(|r| r.or_gt),
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            f_measure: avg(|r| r.f_measure),
            tp: reports.iter().map(|r| r.tp).sum(),
            fp: reports.iter().map(|r| r.fp).sum(),
            fn_: reports.iter().map(|r| r.fn_).sum(),
            tn: reports.iter().map(|r| r.tn).sum(),
        })
    }

    /// Named fields in a fixed order, for serialization.
    pub fn fields(&self) -> [(&'static str, f64); 11] {
        [
            ("mae", self.mae),
            ("iou", self.iou),
            ("or", self.or),
            ("or_gt", self.or_gt),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f_measure", self.f_measure),
            ("tp", self.tp as f64),
            ("fp", self.fp as f64),
            ("fn", self.fn_ as f64),
            ("tn", self.tn as f64),
        ]
    }
}

/// Metrics of `pred` against a binary `target` at `threshold` (pred ≥ threshold is positive).
pub fn segmentation_metrics<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, threshold: f64) -> Result<MetricReport> {
    ops::same_shape("segmentation_metrics", pred.shape(), target.shape())?;
    if pred.is_empty() {
        return Err(Error::invalid("segmentation_metrics", "empty tensors"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("segmentation_metrics", "threshold must lie in (0, 1)"));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    let mut abs = 0.0;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let (p, t) = (p.as_f64(), t.as_f64());
        abs += (p - t).abs();
        match (p >= threshold, t >= 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(MetricReport::from_counts(abs / pred.len() as f64, tp, fp, fn_, tn))
}

/// Per-item metrics for a batch of maps.
pub fn batch_metrics<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, threshold: f64) -> Result<Vec<MetricReport>> {
    ops::same_shape("segmentation_metrics", pred.shape(), target.shape())?;
    (0..pred.shape().n).map(|i| segmentation_metrics(&pred.batch_item(i), &target.batch_item(i), threshold)).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

/// Accuracy and macro-averaged precision/recall/F1 over `classes` classes.
pub fn classification_metrics<T: Real>(logits: &[Vec<T>], labels: &[usize], classes: usize) -> Result<ClassReport> {
    if logits.len() != labels.len() {
        return Err(Error::ShapeMismatch { op: "classification_metrics", dim: "rows", expected: labels.len(), got: logits.len() });
    }
    if logits.is_empty() {
        return Err(Error::invalid("classification_metrics", "no samples"));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (row, &label) in logits.iter().zip(labels) {
        if row.len() != classes {
            return Err(Error::ShapeMismatch { op: "classification_metrics", dim: "classes", expected: classes, got: row.len() });
        }
        if label >= classes {
            return Err(Error::invalid("classification_metrics", alloc::format!("label {label} out of range")));
        }
        confusion[label][argmax(row)] += 1;
    }
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for c in 0..classes {
        let tp = confusion[c][c] as f64;
        let predicted: u64 = (0..classes).map(|t| confusion[t][c]).sum();
        let actual: u64 = confusion[c].iter().sum();
        let pc = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let rc = if actual == 0 { 0.0 } else { tp / actual as f64 };
        p += pc;
        r += rc;
        f += if pc + rc == 0.0 { 0.0 } else { 2.0 * pc * rc / (pc + rc) };
    }
    let k = classes as f64;
    Ok(ClassReport { accuracy: correct as f64 / labels.len() as f64, precision: p / k, recall: r / k, f1: f / k, confusion })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn half(shape: Shape) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, y, _| if y < shape.h / 2 { 1.0 } else { 0.0 })
    }

    #[test]
    fn perfect_prediction() {
        let t = half(Shape::new(1, 1, 4, 4));
        let r = segmentation_metrics(&t, &t, DEFAULT_THRESHOLD).unwrap();
        assert_eq!((r.mae, r.iou, r.f_measure), (0.0, 1.0, 1.0));
    }

    #[test]
    fn all_ones_against_half() {
        let s = Shape::new(1, 1, 4, 4);
        let r = segmentation_metrics(&Tensor::ones(s), &half(s), 0.5).unwrap();
        assert_eq!((r.iou, r.recall, r.precision), (0.5, 1.0, 0.5));
        assert_eq!(r.or_gt, 1.0);
    }

    #[test]
    fn empty_prediction_convention() {
        let s = Shape::new(1, 1, 4, 4);
        let r = segmentation_metrics(&Tensor::zeros(s), &half(s), 0.5).unwrap();
        assert_eq!((r.iou, r.recall, r.precision, r.f_measure), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        let s = Shape::new(1, 1, 2, 2);
        let a = Tensor::<f64>::zeros(s);
        assert!(segmentation_metrics(&a, &Tensor::zeros(Shape::new(1, 1, 2, 3)), 0.5).is_err());
        assert!(segmentation_metrics(&a, &a, 1.0).is_err());
        let e = Tensor::<f64>::zeros(Shape::new(0, 1, 2, 2));
        assert!(segmentation_metrics(&e, &e, 0.5).is_err());
    }

    #[test]
    fn classification_basics() {
        let logits = vec![vec![2.0, 0.0, 0.0], vec![0.0, 3.0, 1.0], vec![0.0, 0.0, 1.0]];
        let r = classification_metrics(&logits, &[0, 1, 2], 3).unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (1.0, 1.0, 1.0, 1.0));
        let uniform = vec![vec![0.5f64; 3]; 4];
        let r = classification_metrics(&uniform, &[0, 1, 0, 2], 3).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert!(classification_metrics(&uniform, &[0, 1], 3).is_err());
        assert!(classification_metrics(&uniform, &[0, 1, 0, 2], 4).is_err());
    }
}
