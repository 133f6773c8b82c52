use std::fmt;

use ndarray::Array2;

use super::LossResult;
use crate::error::{Error, Result};

/// Mean-reduced regression losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegressionKind {
    L1,
    Mse,
    Huber { delta: f64 },
}

impl fmt::Display for RegressionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegressionKind::L1 => f.write_str("l1"),
            RegressionKind::Mse => f.write_str("mse"),
            RegressionKind::Huber { .. } => f.write_str("huber"),
        }
    }
}

pub fn regression_loss(
    kind: RegressionKind,
    predictions: &[f64],
    targets: &[f64],
) -> Result<LossResult> {
    if predictions.len() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions, {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::DimensionMismatch("empty regression batch".into()));
    }
    if let RegressionKind::Huber { delta } = kind {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "huber delta must be > 0, got {delta}"
            )));
        }
    }
    let inv_n = 1.0 / predictions.len() as f64;
    let (terms, grads): (Vec<f64>, Vec<f64>) = predictions
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let r = p - t;
            let (loss, slope) = match kind {
                RegressionKind::L1 => (r.abs(), sign(r)),
                RegressionKind::Mse => (r * r, 2.0 * r),
                RegressionKind::Huber { delta } => {
                    if r.abs() <= delta {
                        (0.5 * r * r, r)
                    } else {
                        (delta * (r.abs() - 0.5 * delta), delta * sign(r))
                    }
                }
            };
            (loss * inv_n, slope * inv_n)
        })
        .unzip();
    let grad = Array2::from_shape_vec((grads.len(), 1), grads).expect("column shape");
    Ok(LossResult::from_terms(terms, grad, 0))
}

/// Sign with a zero subgradient at zero.
fn sign(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}
