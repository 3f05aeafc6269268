//! Statistical helpers shared by the verification harnesses.
//!
//! Tolerance convention: a scalar Monte Carlo estimate is accepted when it lies
//! within [`CLT_SIGMAS`] standard errors of its target.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CLT_SIGMAS: f64 = 4.0;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("reference matrix has zero Frobenius norm")]
    ZeroReference,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("log-log fit needs positive coordinates, got ({0}, {1})")]
    NonPositive(f64, f64),
    #[error("x values are not distinct")]
    DegenerateX,
    #[error("non-finite sample")]
    NonFinite,
    #[error("unsupported confidence level {0}")]
    UnsupportedLevel(f64),
}

/// `CLT_SIGMAS * sd / sqrt(m)`.
pub fn clt_tol(sd: f64, m: usize) -> f64 {
    CLT_SIGMAS * sd / (m as f64).sqrt()
}

/// Relative Frobenius distance `‖a − b‖_F / ‖b‖_F`.
pub fn frob_rel_dist(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64, StatsError> {
    if a.shape() != b.shape() {
        return Err(StatsError::ShapeMismatch(a.shape(), b.shape()));
    }
    let denom = b.norm();
    if denom == 0.0 {
        return Err(StatsError::ZeroReference);
    }
    Ok((a - b).norm() / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `ln y` on `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<FitResult, StatsError> {
    if points.len() < 3 {
        return Err(StatsError::TooFewPoints {
            needed: 3,
            got: points.len(),
        });
    }
    let mut logs = Vec::with_capacity(points.len());
    for &(x, y) in points {
        if !(x > 0.0 && y > 0.0) || !x.is_finite() || !y.is_finite() {
            return Err(StatsError::NonPositive(x, y));
        }
        logs.push((x.ln(), y.ln()));
    }
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx <= f64::EPSILON * k {
        return Err(StatsError::DegenerateX);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = logs
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let slope_stderr = (sse / (k - 2.0) / sxx).sqrt();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(FitResult {
        slope,
        intercept,
        slope_stderr,
        r_squared,
    })
}

/// Normal-approximation confidence interval: `(mean, z * s / sqrt(k))`.
///
/// `level` must be 0.95 or 0.99.
pub fn mean_ci(samples: &[f64], level: f64) -> Result<(f64, f64), StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::TooFewPoints {
            needed: 2,
            got: samples.len(),
        });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let z = if (level - 0.95).abs() < 1e-12 {
        Z_95
    } else if (level - 0.99).abs() < 1e-12 {
        2.575_829_303_549_085
    } else {
        return Err(StatsError::UnsupportedLevel(level));
    };
    let (mean, sd) = mean_sd(samples);
    Ok((mean, z * sd / (samples.len() as f64).sqrt()))
}

/// Mean and unbiased standard deviation.
pub fn mean_sd(samples: &[f64]) -> (f64, f64) {
    let k = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / k;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, var.sqrt())
}

/// Whether the intervals `m1 ± h1` and `m2 ± h2` intersect.
pub fn intervals_overlap((m1, h1): (f64, f64), (m2, h2): (f64, f64)) -> bool {
    (m1 - m2).abs() <= h1 + h2
}
