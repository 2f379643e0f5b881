use std::sync::Arc;

use crate::numeric::{Scalar, Tensor};

use super::{Result, TrainError};

/// Mean over valid (position, task) cells of the clamped binary cross
/// entropy on logits. Differentiable; clamped cells contribute a constant.
pub fn multitask_bce<T: Scalar>(
    logits: &Tensor<T>,
    labels: &Tensor<T>,
    mask: &[bool],
    clamp: f64,
) -> Result<Tensor<T>> {
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(TrainError::Contract("loss over zero valid cells".into()));
    }
    let sum = logits.masked_bce_sum(labels, Arc::new(mask.to_vec()), clamp)?;
    Ok(sum.scale(T::from_f64(1.0 / valid as f64))?)
}

/// Numerically stable σ(z) clamped to [clamp, 1 − clamp].
pub fn sigmoid_prob(z: f64, clamp: f64) -> f64 {
    let p = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
    p.clamp(clamp, 1.0 - clamp)
}

fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Normalized entropy in nats: mean BCE of the predictions divided by the
/// entropy of the empirical positive rate. A constant predictor at the base
/// rate scores exactly 1; lower is better. The log base cancels in the
/// ratio.
pub fn normalized_entropy(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(TrainError::Contract(format!(
            "normalized entropy needs matching non-empty inputs, got {} probs / {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&y| y > 0.5).count();
    if positives == 0 || positives == labels.len() {
        return Err(TrainError::Contract(
            "normalized entropy is undefined for a single-class label set".into(),
        ));
    }
    let n = labels.len() as f64;
    let mean_bce: f64 =
        probs.iter().zip(labels).map(|(&p, &y)| bce_term(p, y)).sum::<f64>() / n;
    let base = positives as f64 / n;
    let base_entropy = -(base * base.ln() + (1.0 - base) * (1.0 - base).ln());
    Ok(mean_bce / base_entropy)
}

/// Fraction of thresholded predictions matching the labels.
pub fn accuracy(probs: &[f64], labels: &[f64]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p >= 0.5) == (y > 0.5))
        .count();
    hits as f64 / probs.len() as f64
}
