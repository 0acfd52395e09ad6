//! Multinomial logistic regression: a smooth convex model for the influence oracles.

use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

/// Loss and gradient of softmax regression. `weights` is row-major `K x F`
/// where `F = features.len()`; the gradient has the same shape.
pub fn linear_softmax_loss_grad(
    features: &[f64],
    label: usize,
    weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let f = features.len();
    if f == 0 || weights.len() % f != 0 {
        return Err(Error::dims("linear weights", f, weights.len()));
    }
    let k = weights.len() / f;
    if label >= k {
        return Err(Error::OutOfRange {
            what: "class label",
            value: label,
            limit: k,
        });
    }
    let logits: Vec<f64> = (0..k)
        .map(|c| math::dot(&weights[c * f..(c + 1) * f], features))
        .collect();
    let lse = math::log_sum_exp(&logits);
    let loss = lse - logits[label];
    let mut grad = Vec::with_capacity(weights.len());
    for (c, &l) in logits.iter().enumerate() {
        let coef = libm::exp(l - lse) - if c == label { 1.0 } else { 0.0 };
        grad.extend(features.iter().map(|x| coef * x));
    }
    Ok((loss, grad))
}
