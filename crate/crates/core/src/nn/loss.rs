//! Classification losses for the two head kinds.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax probabilities, computed after subtracting the maximum logit.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    softmax_cross_entropy_with_probs(logits, label).map(|(l, _)| l)
}

pub(crate) fn softmax_cross_entropy_with_probs(logits: &Tensor, label: usize) -> Result<(f64, Vec<f64>)> {
    let x = logits.data();
    if x.len() < 2 {
        return Err(invalid!("softmax needs at least 2 classes, got {}", x.len()));
    }
    if label >= x.len() {
        return Err(invalid!("label {label} out of range for {} classes", x.len()));
    }
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = x.iter().map(|&v| (v - m).exp()).sum();
    let log_z = m + z.ln();
    let probs = x.iter().map(|&v| (v - log_z).exp()).collect();
    Ok((log_z - x[label], probs))
}

/// Mean over classes of `max(x, 0) - x·t + log(1 + exp(-|x|))`.
pub fn sigmoid_cross_entropy(logits: &Tensor, targets: &[f64]) -> Result<f64> {
    let x = logits.data();
    if x.len() != targets.len() {
        return Err(invalid!(
            "{} logits but {} targets",
            x.len(),
            targets.len()
        ));
    }
    if let Some(t) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(invalid!("sigmoid targets must be 0 or 1, got {t}"));
    }
    let total: f64 = x
        .iter()
        .zip(targets)
        .map(|(&v, &t)| v.max(0.0) - v * t + (-v.abs()).exp().ln_1p())
        .sum();
    Ok(total / x.len() as f64)
}

/// Multi-hot target vector for a set of class labels.
pub fn multi_hot(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let mut t = vec![0.0; classes];
    for &l in labels {
        if l >= classes {
            return Err(invalid!("label {l} out of range for {classes} classes"));
        }
        t[l] = 1.0;
    }
    Ok(t)
}
