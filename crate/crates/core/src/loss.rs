//! Asymmetric smooth-L1 loss.
//!
//! For a residual `x = pred - gt` the loss is quadratic on `(-beta, beta)`
//! and linear outside it, like smooth-L1, but undersized predictions
//! (`x < 0`) cost `alpha` times as much as oversized ones of the same
//! magnitude:
//!
//! ```text
//!   x in [0, beta):    x^2 / (2 sqrt(a) beta)
//!   x in (-beta, 0):   sqrt(a) x^2 / (2 beta)
//!   x >= beta:         x / sqrt(a) - beta / (2 sqrt(a))
//!   x <= -beta:        -sqrt(a) x - sqrt(a) beta / 2
//! ```
//!
//! `alpha = 1` is the ordinary smooth-L1 loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("alpha must be finite and > 0, got {0}")]
    InvalidAlpha(f64),
    #[error("beta must be finite and > 0, got {0}")]
    InvalidBeta(f64),
    #[error("non-finite loss input {0}")]
    NonFiniteInput(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AsymmetricLossParams {
    alpha: f64,
    beta: f64,
    #[serde(skip)]
    sqrt_alpha: f64,
}

impl AsymmetricLossParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, LossError> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(LossError::InvalidAlpha(alpha));
        }
        if !(beta.is_finite() && beta > 0.0) {
            return Err(LossError::InvalidBeta(beta));
        }
        Ok(Self {
            alpha,
            beta,
            sqrt_alpha: alpha.sqrt(),
        })
    }

    /// Standard smooth-L1 with the given smoothing interval.
    pub fn symmetric(beta: f64) -> Result<Self, LossError> {
        Self::new(1.0, beta)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Loss at `x`; inputs are assumed finite.
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        let (a, b) = (self.sqrt_alpha, self.beta);
        if x >= b {
            x / a - b / (2.0 * a)
        } else if x >= 0.0 {
            x * x / (2.0 * a * b)
        } else if x > -b {
            a * (x * x) / (2.0 * b)
        } else {
            -a * x - a * b / 2.0
        }
    }

    /// Derivative of [`Self::value`]; the linear-branch slope is used at `x = ±beta`.
    #[inline]
    pub fn gradient(&self, x: f64) -> f64 {
        let (a, b) = (self.sqrt_alpha, self.beta);
        if x >= b {
            1.0 / a
        } else if x >= 0.0 {
            x / (a * b)
        } else if x > -b {
            a * x / b
        } else {
            -a
        }
    }

    pub fn sample(&self, x: f64) -> Result<LossSample, LossError> {
        Ok(LossSample {
            x,
            value: loss_value(x, self)?,
            gradient: loss_gradient(x, self)?,
        })
    }
}

impl<'de> Deserialize<'de> for AsymmetricLossParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            alpha: f64,
            beta: f64,
        }
        let raw = Raw::deserialize(d)?;
        Self::new(raw.alpha, raw.beta).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossSample {
    pub x: f64,
    pub value: f64,
    pub gradient: f64,
}

fn finite(x: f64) -> Result<f64, LossError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(LossError::NonFiniteInput(x))
    }
}

pub fn loss_value(x: f64, p: &AsymmetricLossParams) -> Result<f64, LossError> {
    Ok(p.value(finite(x)?))
}

pub fn loss_gradient(x: f64, p: &AsymmetricLossParams) -> Result<f64, LossError> {
    Ok(p.gradient(finite(x)?))
}

/// Plain smooth-L1 with interval `beta`.
pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let ax = x.abs();
    if ax < beta {
        0.5 * x * x / beta
    } else {
        ax - 0.5 * beta
    }
}

/// Loss and gradient with respect to `[x_min, y_min, width, height]` of the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxLoss {
    pub value: f64,
    pub gradient: [f64; 4],
}

/// Box regression loss: the asymmetric loss on width and height residuals
/// plus smooth-L1 (same `beta`, `alpha = 1`) on the center offsets.
pub fn box_regression_loss(pred: &BBox, gt: &BBox, p: &AsymmetricLossParams) -> BoxLoss {
    let center = AsymmetricLossParams {
        alpha: 1.0,
        beta: p.beta,
        sqrt_alpha: 1.0,
    };
    let (pcx, pcy) = pred.center();
    let (gcx, gcy) = gt.center();
    let dw = pred.width() - gt.width();
    let dh = pred.height() - gt.height();
    let dcx = pcx - gcx;
    let dcy = pcy - gcy;

    let value = p.value(dw) + p.value(dh) + center.value(dcx) + center.value(dcy);

    // center = min + size / 2
    let gcx_ = center.gradient(dcx);
    let gcy_ = center.gradient(dcy);
    let gradient = [
        gcx_,
        gcy_,
        p.gradient(dw) + 0.5 * gcx_,
        p.gradient(dh) + 0.5 * gcy_,
    ];
    BoxLoss { value, gradient }
}

/// `(x, value, gradient)` rows sampled on `n` evenly spaced points of `[lo, hi]`.
pub fn loss_table(p: &AsymmetricLossParams, lo: f64, hi: f64, n: usize) -> Vec<LossSample> {
    let steps = n.max(2) - 1;
    (0..=steps)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / steps as f64;
            LossSample {
                x,
                value: p.value(x),
                gradient: p.gradient(x),
            }
        })
        .collect()
}
