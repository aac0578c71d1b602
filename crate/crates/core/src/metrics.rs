//! Top-1, top-k and macro-F1 over logit rows.

use alloc::vec;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub top5: f64,
    pub f1: f64,
}

/// Evaluates logits against labels; top-5 uses `k = min(5, C)`.
pub fn evaluate(logits: &Tensor, labels: &[usize]) -> Result<Metrics> {
    let (n, c) = logits.dims2()?;
    if n == 0 {
        return Err(Error::EmptyData("test set"));
    }
    if labels.len() != n {
        return Err(Error::shape("one label per logit row is required"));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let k = c.min(5);
    let mut hit1 = 0usize;
    let mut hitk = 0usize;
    let mut tp = vec![0usize; c];
    let mut pred_count = vec![0usize; c];
    let mut true_count = vec![0usize; c];
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let pred = argmax(row);
        // rank of the true class: entries strictly greater, ties toward lower index
        let rank = row
            .iter()
            .enumerate()
            .filter(|(j, v)| **v > row[y] || (**v == row[y] && *j < y))
            .count();
        hit1 += (pred == y) as usize;
        hitk += (rank < k) as usize;
        pred_count[pred] += 1;
        true_count[y] += 1;
        if pred == y {
            tp[y] += 1;
        }
    }
    let mut f1 = 0.0;
    for j in 0..c {
        let denom = pred_count[j] + true_count[j];
        if denom > 0 {
            f1 += 2.0 * tp[j] as f64 / denom as f64;
        }
    }
    Ok(Metrics {
        top1: hit1 as f64 / n as f64,
        top5: hitk as f64 / n as f64,
        f1: f1 / c as f64,
    })
}

/// First index of the largest entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// `Σ size_n · m_n / Σ size_n`.
pub fn client_average(items: &[(Metrics, usize)]) -> Result<Metrics> {
    let total: usize = items.iter().map(|(_, s)| s).sum();
    if items.is_empty() || items.iter().any(|(_, s)| *s == 0) {
        return Err(Error::invalid("sizes", "client sizes must be positive"));
    }
    let w = |f: fn(&Metrics) -> f64| {
        items.iter().map(|(m, s)| f(m) * *s as f64).sum::<f64>() / total as f64
    };
    Ok(Metrics {
        top1: w(|m| m.top1),
        top5: w(|m| m.top5),
        f1: w(|m| m.f1),
    })
}
