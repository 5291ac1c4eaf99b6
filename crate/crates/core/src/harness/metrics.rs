use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Label;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction and label lists differ in length ({predictions} vs {labels})")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("metrics need at least one prediction")]
    Empty,
}

/// Confusion counts with `fake` as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and F1 over paired predictions and ground truth. With no
/// positives predicted or present, F1 is 1.
pub fn compute_metrics(predictions: &[Label], labels: &[Label]) -> Result<Metrics, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut c = Confusion::default();
    for (p, t) in predictions.iter().zip(labels) {
        match (p, t) {
            (Label::Fake, Label::Fake) => c.tp += 1,
            (Label::Fake, Label::Real) => c.fp += 1,
            (Label::Real, Label::Fake) => c.fn_ += 1,
            (Label::Real, Label::Real) => c.tn += 1,
        }
    }
    let n = predictions.len();
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if c.tp + c.fp + c.fn_ == 0 {
        1.0
    } else {
        ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
    };
    Ok(Metrics { n, accuracy: ratio(c.tp + c.tn, n), precision, recall, f1, confusion: c })
}
