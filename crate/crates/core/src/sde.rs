//! Strong error of Gaussian MSGD against its SDE.
//!
//! The discrete chain
//!
//! ```text
//! θ_{k+1} = θ_k − η∇L(θ_k) + √η C(θ_k) ΔW_k,    C(θ) = ∇Lcal(θ)/√(bN)
//! ```
//!
//! is coupled with an Euler–Maruyama path of `dΘ = −∇L dt + √η C(Θ) dW` on the
//! finer grid `h = η/m`. Both are driven by one `N`-dimensional Brownian
//! motion: `ΔW_k` is the sum of the `m` fine increments on `[kη, (k+1)η]`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{gradient_matrix, Dataset, LinearRegression, Model, ModelError};
use crate::par::map_indexed;
use crate::rng::RngStream;
use crate::stats::{loglog_slope, mean_ci, FitResult, StatsError};

#[derive(Debug, Error, PartialEq)]
pub enum SdeError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("state became non-finite at coarse step {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledPaths {
    pub eta: f64,
    pub m: usize,
    /// `θ_0..θ_K`.
    pub discrete_iterates: Vec<DVector<f64>>,
    /// `Θ` at every fine time `jh`, `j = 0..K·m`.
    pub fine_path: Vec<DVector<f64>>,
    /// Brownian increments per fine step, each `N(0, h I_N)`.
    pub fine_increments: Vec<DVector<f64>>,
    /// Per coarse step, the sum of its `m` fine increments.
    pub coarse_increments: Vec<DVector<f64>>,
    /// `‖Θ_{kη} − θ_k‖²` for `k = 0..K`.
    pub squared_errors: Vec<f64>,
}

impl CoupledPaths {
    pub fn max_squared_error(&self) -> f64 {
        self.squared_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Number of coarse steps `K = T/η`, rejecting horizons off the grid.
fn coarse_steps(eta: f64, m: usize, horizon: f64) -> Result<usize, SdeError> {
    if !(eta > 0.0 && horizon > 0.0) || m == 0 {
        return Err(SdeError::InvalidGrid(format!(
            "need eta > 0, T > 0, m >= 1; got eta = {eta}, T = {horizon}, m = {m}"
        )));
    }
    let k = (horizon / eta).round();
    if k < 1.0 || (k * eta - horizon).abs() > 1e-9 * horizon {
        return Err(SdeError::InvalidGrid(format!(
            "T = {horizon} is not a multiple of eta = {eta}"
        )));
    }
    Ok(k as usize)
}

/// One drift-plus-diffusion step: `θ − dt·∇L(θ) + √η·C(θ)·dw`.
fn step<M: Model + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &DVector<f64>,
    dt: f64,
    diffusion: f64,
    dw: &DVector<f64>,
) -> Result<DVector<f64>, ModelError> {
    let g = gradient_matrix(model, theta, data)?.cols;
    let grad = g.column_mean();
    let mut next = theta - grad * dt;
    next.gemv(diffusion, &g, dw, 1.0);
    Ok(next)
}

struct Coupling {
    discrete: Vec<DVector<f64>>,
    fine: Vec<DVector<f64>>,
    fine_dw: Vec<DVector<f64>>,
    coarse_dw: Vec<DVector<f64>>,
    sq_err: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn couple<M: Model + ?Sized>(
    model: &M,
    data: &Dataset,
    theta0: &DVector<f64>,
    eta: f64,
    m: usize,
    horizon: f64,
    b: usize,
    s: &mut RngStream,
    keep: bool,
) -> Result<Coupling, SdeError> {
    let k_steps = coarse_steps(eta, m, horizon)?;
    model.check(theta0, data)?;
    if b == 0 {
        return Err(SdeError::InvalidGrid("b must be at least 1".into()));
    }
    let n = data.len();
    let h = eta / m as f64;
    let sqrt_h = h.sqrt();
    let diffusion = (eta / (b * n) as f64).sqrt();

    let mut out = Coupling {
        discrete: Vec::new(),
        fine: Vec::new(),
        fine_dw: Vec::new(),
        coarse_dw: Vec::new(),
        sq_err: vec![0.0],
    };
    let mut coarse = theta0.clone();
    let mut fine = theta0.clone();
    if keep {
        out.discrete.push(coarse.clone());
        out.fine.push(fine.clone());
    }
    let mut dw = DVector::zeros(n);
    for k in 0..k_steps {
        let mut total = DVector::<f64>::zeros(n);
        for _ in 0..m {
            s.fill_gaussian(dw.as_mut_slice());
            dw *= sqrt_h;
            fine = step(model, data, &fine, h, diffusion, &dw)?;
            total += &dw;
            if keep {
                out.fine.push(fine.clone());
                out.fine_dw.push(dw.clone());
            }
        }
        coarse = step(model, data, &coarse, eta, diffusion, &total)?;
        if coarse.iter().chain(fine.iter()).any(|v| !v.is_finite()) {
            return Err(SdeError::NonFinite(k + 1));
        }
        out.sq_err.push((&fine - &coarse).norm_squared());
        if keep {
            out.discrete.push(coarse.clone());
            out.coarse_dw.push(total);
        }
    }
    Ok(out)
}

/// Couples the discrete chain with a fine Euler–Maruyama path over `[0, T]`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_coupled<M: Model + ?Sized>(
    model: &M,
    data: &Dataset,
    theta0: &DVector<f64>,
    eta: f64,
    m: usize,
    horizon: f64,
    b: usize,
    s: &mut RngStream,
) -> Result<CoupledPaths, SdeError> {
    let c = couple(model, data, theta0, eta, m, horizon, b, s, true)?;
    Ok(CoupledPaths {
        eta,
        m,
        discrete_iterates: c.discrete,
        fine_path: c.fine,
        fine_increments: c.fine_dw,
        coarse_increments: c.coarse_dw,
        squared_errors: c.sq_err,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongErrorPoint {
    pub eta: f64,
    /// Mean over trials of `max_k ‖Θ_{kη} − θ_k‖²`.
    pub mean_max_sq_error: f64,
    /// 95% normal half-width.
    pub ci_half_width: f64,
    pub trials: usize,
    pub per_trial: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongErrorCurve {
    pub m: usize,
    pub horizon: f64,
    pub points: Vec<StrongErrorPoint>,
    /// Log-log fit of mean error against `η`; needs at least three step sizes.
    pub fit: Option<FitResult>,
}

impl StrongErrorCurve {
    /// `eta,trial,max_sq_error`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eta,trial,max_sq_error\n");
        for p in &self.points {
            for (t, e) in p.per_trial.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", p.eta, t, e));
            }
        }
        out
    }

    /// `eta,mean_max_sq_error,ci_half_width,trials`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("eta,mean_max_sq_error,ci_half_width,trials\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{}\n",
                p.eta, p.mean_max_sq_error, p.ci_half_width, p.trials
            ));
        }
        out
    }
}

/// Mean max-over-steps squared strong error for each `η`, trials in parallel.
///
/// Trial `t` at the `i`-th step size uses the stream `s.split("eta{i}/trial{t}")`.
#[allow(clippy::too_many_arguments)]
pub fn strong_error_curve<M: Model + ?Sized>(
    model: &M,
    data: &Dataset,
    theta0: &DVector<f64>,
    etas: &[f64],
    m: usize,
    horizon: f64,
    b: usize,
    trials: usize,
    s: &RngStream,
) -> Result<StrongErrorCurve, SdeError> {
    if etas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(SdeError::InvalidGrid("etas must be strictly decreasing".into()));
    }
    if trials < 2 {
        return Err(SdeError::InvalidGrid("need at least 2 trials".into()));
    }
    for &eta in etas {
        coarse_steps(eta, m, horizon)?;
    }
    let mut points = Vec::with_capacity(etas.len());
    for (i, &eta) in etas.iter().enumerate() {
        let per_trial = map_indexed(trials, |t| {
            let mut ts = s.split(&format!("eta{i}/trial{t}"));
            couple(model, data, theta0, eta, m, horizon, b, &mut ts, false)
                .map(|c| c.sq_err.into_iter().fold(0.0, f64::max))
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        let (mean, half) = mean_ci(&per_trial, 0.95)?;
        points.push(StrongErrorPoint {
            eta,
            mean_max_sq_error: mean,
            ci_half_width: half,
            trials,
            per_trial,
        });
    }
    let fit = if points.len() >= 3 {
        let pts: Vec<(f64, f64)> = points.iter().map(|p| (p.eta, p.mean_max_sq_error)).collect();
        Some(loglog_slope(&pts)?)
    } else {
        None
    };
    Ok(StrongErrorCurve {
        m,
        horizon,
        points,
        fit,
    })
}

/// Regularized least squares with `d = 2`: the problem used for the order test.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeTestProblem {
    pub model: LinearRegression,
    pub data: Dataset,
    /// Ridge minimizer.
    pub theta_opt: DVector<f64>,
    /// Start point, offset from the minimizer by `(0.5, −0.5)`.
    pub theta0: DVector<f64>,
}

pub fn ridge_test_problem(n: usize, l2: f64, s: &mut RngStream) -> Result<RidgeTestProblem, ModelError> {
    let inputs = s.gaussian_vec(2 * n);
    let targets = (0..n)
        .map(|i| inputs[2 * i] - 0.5 * inputs[2 * i + 1] + 0.5 * s.next_gaussian())
        .collect();
    let data = Dataset::new(2, inputs, targets)?;
    let model = LinearRegression::ridge(2, l2);
    let x = nalgebra::DMatrix::from_row_slice(n, 2, &data.inputs);
    let y = DVector::from_column_slice(&data.targets);
    let gram = x.transpose() * &x / n as f64 + nalgebra::DMatrix::identity(2, 2) * l2;
    let theta_opt = gram
        .cholesky()
        .ok_or(ModelError::NotPositiveDefinite)?
        .solve(&(x.transpose() * y / n as f64));
    let theta0 = &theta_opt + DVector::from_vec(vec![0.5, -0.5]);
    Ok(RidgeTestProblem {
        model,
        data,
        theta_opt,
        theta0,
    })
}
