//! Accuracy metrics in percent and aggregation over seeds.

use crate::error::{Error, Result};

fn check(pred: &[usize], labels: &[usize]) -> Result<()> {
    if pred.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), labels.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyDataset("no predictions to score".into()));
    }
    Ok(())
}

/// Overall accuracy in percent.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    check(pred, labels)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Recall of every class in percent; `None` for classes absent from `labels`.
pub fn per_class_accuracy(pred: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Option<f64>>> {
    check(pred, labels)?;
    let mut hits = vec![0usize; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (&p, &y) in pred.iter().zip(labels) {
        if y >= num_classes {
            return Err(crate::error::contract(format!("label {y} outside [0, {num_classes})")));
        }
        counts[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| (c > 0).then(|| 100.0 * h as f64 / c as f64))
        .collect())
}

/// Mean of the per-class accuracies over classes that occur.
pub fn mean_per_class_accuracy(pred: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    let per: Vec<f64> = per_class_accuracy(pred, labels, num_classes)?.into_iter().flatten().collect();
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyDataset("no values to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}
