//! Classification metrics: accuracy and Matthews correlation.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

pub fn confusion(predictions: &[u8], labels: &[u8]) -> Confusion {
    debug_assert_eq!(predictions.len(), labels.len());
    let mut c = Confusion::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => unreachable!("binary labels expected"),
        }
    }
    c
}

pub fn accuracy(predictions: &[u8], labels: &[u8]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    correct as f64 / predictions.len() as f64
}

/// Matthews correlation coefficient; 0 when any marginal is empty (the
/// constant-predictor case).
pub fn mcc(c: &Confusion) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub accuracy: f64,
    pub mcc: f64,
}

pub fn task_metrics(predictions: &[u8], labels: &[u8]) -> TaskMetrics {
    TaskMetrics { accuracy: accuracy(predictions, labels), mcc: mcc(&confusion(predictions, labels)) }
}

/// Median with the even-count convention of averaging the middle pair.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}
