//! SmoothL1 and its dynamic-`beta` variant, with analytic gradients, plus the
//! binary cross-entropy used by the toy classifier.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Delta;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("beta must be positive and finite, got {0}")]
    BadBeta(f64),
    #[error("score must lie strictly inside (0, 1), got {0}")]
    BadScore(f64),
}

/// Loss value together with its derivative with respect to the input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradient: f64,
}

fn check_beta(beta: f64) -> Result<(), LossError> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(LossError::BadBeta(beta))
    }
}

/// `0.5 x^2 / beta` inside `|x| < beta`, `|x| - 0.5 beta` outside.
pub fn smooth_l1(x: f64, beta: f64) -> Result<LossValue, LossError> {
    check_beta(beta)?;
    let ax = x.abs();
    Ok(if ax < beta {
        LossValue {
            value: 0.5 * x * x / beta,
            gradient: x / beta,
        }
    } else {
        LossValue {
            value: ax - 0.5 * beta,
            gradient: x.signum(),
        }
    })
}

/// SmoothL1 evaluated at the controller's current `beta_now`.
///
/// Kept as its own entry point so training code always routes the
/// regression loss through the live controller value.
pub fn dsl(x: f64, beta_now: f64) -> Result<LossValue, LossError> {
    smooth_l1(x, beta_now)
}

/// Sum of per-coordinate SmoothL1 over `pred - target`.
pub fn regression_loss(pred: &Delta, target: &Delta, beta: f64) -> Result<(f64, Delta), LossError> {
    check_beta(beta)?;
    let p = pred.to_array();
    let t = target.to_array();
    let mut value = 0.0;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let l = smooth_l1(p[k] - t[k], beta)?;
        value += l.value;
        grad[k] = l.gradient;
    }
    Ok((value, Delta::from_array(grad)))
}

/// Negative log-likelihood of `label` under a Bernoulli with probability
/// `score`; the gradient is taken with respect to the logit.
pub fn binary_ce(score: f64, label: bool) -> Result<LossValue, LossError> {
    if !(score > 0.0 && score < 1.0) {
        return Err(LossError::BadScore(score));
    }
    let y = if label { 1.0 } else { 0.0 };
    let value = if label { -score.ln() } else { -(1.0 - score).ln() };
    Ok(LossValue {
        value,
        gradient: score - y,
    })
}

/// [`binary_ce`] computed from a raw logit, stable for large magnitudes.
pub fn binary_ce_logit(logit: f64, label: bool) -> LossValue {
    let y = if label { 1.0 } else { 0.0 };
    // log(1 + e^z) - y z
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    LossValue {
        value: softplus - y * logit,
        gradient: sigmoid(logit) - y,
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// How per-sample losses are combined over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    /// Weight applied to each of `n` samples.
    pub fn weight(self, n: usize) -> f64 {
        match (self, n) {
            (_, 0) => 0.0,
            (Reduction::Mean, n) => 1.0 / n as f64,
            (Reduction::Sum, _) => 1.0,
        }
    }
}
