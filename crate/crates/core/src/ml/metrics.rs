use serde::{Deserialize, Serialize};

use super::Model;
use crate::domain::{Task, TrainingDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metrics {
    Regression(RegressionMetrics),
    Classification(ClassificationMetrics),
}

impl Metrics {
    /// The selection metric: RMSE for regression, accuracy for classification.
    pub fn primary(&self) -> f64 {
        match self {
            Metrics::Regression(m) => m.rmse,
            Metrics::Classification(m) => m.accuracy,
        }
    }

    /// True when `self` is strictly better than `other` on the primary metric.
    pub fn better_than(&self, other: &Metrics) -> bool {
        match (self, other) {
            (Metrics::Regression(a), Metrics::Regression(b)) => a.rmse < b.rmse,
            (Metrics::Classification(a), Metrics::Classification(b)) => a.accuracy > b.accuracy,
            _ => false,
        }
    }

    pub fn rmse(&self) -> Option<f64> {
        match self {
            Metrics::Regression(m) => Some(m.rmse),
            Metrics::Classification(_) => None,
        }
    }
}

pub fn regression_metrics(predictions: &[f64], targets: &[f64]) -> RegressionMetrics {
    let n = targets.len() as f64;
    let sse: f64 = predictions.iter().zip(targets).map(|(p, y)| (p - y).powi(2)).sum();
    let mae = predictions.iter().zip(targets).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
    let mean = targets.iter().sum::<f64>() / n;
    let sst: f64 = targets.iter().map(|y| (y - mean).powi(2)).sum();
    let r2 = if sst == 0.0 {
        if sse == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - sse / sst
    };
    RegressionMetrics { rmse: (sse / n).sqrt(), mae, r2 }
}

/// Binary metrics with predictions thresholded at 0.5 and class 1 positive.
/// F1 is `2TP / (2TP + FP + FN)`, defined as 1 when there are no positives
/// in either labels or predictions.
pub fn classification_metrics(scores: &[f64], targets: &[f64]) -> ClassificationMetrics {
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (s, y) in scores.iter().zip(targets) {
        let pred = *s >= 0.5;
        let actual = *y >= 0.5;
        correct += usize::from(pred == actual);
        match (pred, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    ClassificationMetrics {
        accuracy: correct as f64 / targets.len() as f64,
        f1: if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 },
    }
}

pub fn evaluate(model: &Model, dataset: &TrainingDataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if model.schema_hash() != dataset.schema_hash {
        return Err(Error::SchemaMismatch(format!("model schema {} != dataset schema {}", model.schema_hash(), dataset.schema_hash)));
    }
    let predictions = dataset.rows.iter().map(|r| model.predict(r)).collect::<Result<Vec<f64>>>()?;
    Ok(metrics_for(model.task(), &predictions, &dataset.targets))
}

pub fn metrics_for(task: Task, predictions: &[f64], targets: &[f64]) -> Metrics {
    match task {
        Task::Regression => Metrics::Regression(regression_metrics(predictions, targets)),
        Task::Classification => Metrics::Classification(classification_metrics(predictions, targets)),
    }
}
