//! Samples needed to estimate the mean activation of a sparse feature whose
//! activation is Gaussian with probability `p` and zero otherwise.
//!
//! ```text
//! n_normal = (z * sigma / d)^2
//! n_sparse = n_normal / p
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeQuery {
    /// Probability that the feature is active, in (0, 1].
    pub activation_prob: f64,
    /// Two-sided confidence level, in (0, 1).
    pub confidence: f64,
    /// Margin of error as a multiple of `sigma`.
    pub rel_margin: f64,
    pub sigma: f64,
    /// Use the exact quantile instead of the two-decimal table value.
    pub exact_z: bool,
}

impl SampleSizeQuery {
    pub fn new(activation_prob: f64, confidence: f64, rel_margin: f64) -> Self {
        Self {
            activation_prob,
            confidence,
            rel_margin,
            sigma: 1.0,
            exact_z: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.activation_prob > 0.0 && self.activation_prob <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "activation probability {} outside (0, 1]",
                self.activation_prob
            )));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidConfig(format!("confidence {} outside (0, 1)", self.confidence)));
        }
        if !(self.rel_margin > 0.0 && self.rel_margin.is_finite()) {
            return Err(Error::InvalidConfig(format!("margin {} must be positive", self.rel_margin)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma {} must be positive", self.sigma)));
        }
        Ok(())
    }

    /// The z value used for the counts.
    pub fn z(&self) -> Result<f64> {
        let z = z_score(self.confidence)?;
        Ok(if self.exact_z { z } else { (z * 100.0).round() / 100.0 })
    }
}

/// Inverse standard normal CDF (Acklam's rational approximation, relative
/// error below 1.2e-9).
fn inv_norm_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.38357751867269e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const P_LOW: f64 = 0.02425;
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    }
}

/// Two-sided critical value `z_{alpha/2}` for `confidence = 1 - alpha`.
pub fn z_score(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidConfig(format!("confidence {confidence} outside (0, 1)")));
    }
    Ok(inv_norm_cdf((1.0 + confidence) / 2.0))
}

/// `(z * sigma / d)^2` before rounding up.
pub fn n_normal_raw(q: &SampleSizeQuery) -> Result<f64> {
    q.validate()?;
    let d = q.rel_margin * q.sigma;
    Ok((q.z()? * q.sigma / d).powi(2))
}

/// `n_normal / p` before rounding up.
pub fn n_sparse_raw(q: &SampleSizeQuery) -> Result<f64> {
    Ok(n_normal_raw(q)? / q.activation_prob)
}

/// Rounds up, treating values within float noise of an integer as that
/// integer (`(1.96 / 0.1)^2` evaluates to 384.15999999999997).
fn ceil_count(v: f64) -> u64 {
    let r = v.round();
    if (v - r).abs() <= 1e-9 * r.max(1.0) {
        r as u64
    } else {
        v.ceil() as u64
    }
}

pub fn n_normal(q: &SampleSizeQuery) -> Result<u64> {
    Ok(ceil_count(n_normal_raw(q)?))
}

pub fn n_sparse(q: &SampleSizeQuery) -> Result<u64> {
    Ok(ceil_count(n_sparse_raw(q)?))
}
