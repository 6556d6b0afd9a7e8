//! Forward-only activations and losses on plain matrices.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Matrix) -> Matrix {
    x.map(sigmoid_scalar)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Mean over rows of `-Σ_c t_c log p_c`.
pub fn cross_entropy(probs: &Matrix, targets: &Matrix) -> Result<f64> {
    if probs.shape() != targets.shape() {
        return Err(Error::shape("cross_entropy", probs.shape(), targets.shape()));
    }
    if probs.rows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| if t == 0.0 { 0.0 } else { -t * clamp_prob(p).ln() })
        .sum();
    Ok(total / probs.rows() as f64)
}

/// Mean over rows of the squared L2 distance between matching rows.
pub fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", a.shape(), b.shape()));
    }
    if a.rows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(total / a.rows() as f64)
}

/// Weighted binary cross-entropy with soft targets, averaged over samples.
pub fn bce(yhat: &[f64], targets: &[f64], weights: &[f64]) -> Result<f64> {
    if yhat.len() != targets.len() || yhat.len() != weights.len() {
        return Err(Error::shape(
            "bce",
            (yhat.len(), 1),
            (targets.len(), weights.len()),
        ));
    }
    if yhat.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = yhat
        .iter()
        .zip(targets)
        .zip(weights)
        .map(|((&p, &y), &w)| {
            let p = clamp_prob(p);
            -w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / yhat.len() as f64)
}
