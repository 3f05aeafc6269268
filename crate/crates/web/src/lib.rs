//! Browser demo. Each operation returns a JSON string so the page can stay
//! plain JavaScript; the same functions are callable (and tested) natively.

use msgd::noise::{empirical_moments, theoretical_sampling_cov, SamplingKind, SamplingSpec};
use msgd::rng::derive_stream;
use msgd::sde::{ridge_test_problem, strong_error_curve};
use msgd::stats::mean_sd;
use msgd::theory::{run_online_recursion, theorem1_bound, OnlineKind, RegressionProblem};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct CovarianceView {
    pub size: usize,
    pub theory: Vec<Vec<f64>>,
    pub empirical: Vec<Vec<f64>>,
    pub frob_rel_dev: f64,
}

#[derive(Debug, Serialize)]
pub struct RiskView {
    pub n: Vec<usize>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub bound: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct StrongErrorView {
    pub eta: Vec<f64>,
    pub error: Vec<f64>,
    pub slope: f64,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Closed-form and Monte Carlo covariance of one noise kind.
pub fn covariance(
    kind: &str,
    n: usize,
    b: usize,
    big_b: usize,
    draws: usize,
    seed: u64,
) -> Result<CovarianceView, String> {
    let kind: SamplingKind = kind.parse().map_err(|e| format!("{e}"))?;
    let spec = if kind.needs_outer_size() {
        SamplingSpec::with_outer(kind, n, b, big_b)
    } else {
        SamplingSpec::new(kind, n, b)
    }
    .map_err(|e| e.to_string())?;
    let theory = theoretical_sampling_cov(&spec).map_err(|e| e.to_string())?;
    let report = empirical_moments(&spec, &mut derive_stream(seed, "web/moments"), draws)
        .map_err(|e| e.to_string())?;
    Ok(CovarianceView {
        size: spec.len(),
        theory: rows(&theory),
        empirical: report.empirical_cov,
        frob_rel_dev: report.frob_rel_cov_dev,
    })
}

/// Averaged online least squares in 4 dimensions against the bound.
pub fn excess_risk(kind: &str, big_b: usize, eta: f64, n: usize, seeds: usize, seed: u64) -> Result<RiskView, String> {
    let kind = match kind {
        "SmallBatchSgd" => OnlineKind::SmallBatchSgd,
        "TheoremSubsample" => OnlineKind::TheoremSubsample,
        "TheoremGaussian" => OnlineKind::TheoremGaussian,
        other => return Err(format!("unknown recursion {other}")),
    };
    if seeds < 2 || n < 10 {
        return Err("need at least 2 seeds and n >= 10".into());
    }
    let theta_star = DVector::from_fn(4, |i, _| (-1f64).powi(i as i32) / (i as f64 + 1.0));
    let problem = RegressionProblem::new(DMatrix::identity(4, 4), theta_star, 0.01).map_err(|e| e.to_string())?;
    problem.check_step(1, eta).map_err(|e| e.to_string())?;
    let big_b = if kind == OnlineKind::SmallBatchSgd { 1 } else { big_b };
    let mut log_at: Vec<usize> = (1..=12)
        .map(|k| (n as f64).powf(k as f64 / 12.0).round() as usize)
        .filter(|&k| k >= 10)
        .collect();
    log_at.dedup();
    let theta0 = problem.theta_star.clone();
    let mut per_seed = Vec::with_capacity(seeds);
    for k in 0..seeds {
        let mut s = derive_stream(seed, &format!("web/risk/seed{k}"));
        let run = run_online_recursion(&problem, &theta0, big_b, 1, eta, n, kind, &log_at, &mut s)
            .map_err(|e| e.to_string())?;
        per_seed.push(run.excess_risk);
    }
    let mut view = RiskView {
        n: log_at.clone(),
        mean: vec![],
        se: vec![],
        bound: vec![],
    };
    for (i, &nk) in log_at.iter().enumerate() {
        let vals: Vec<f64> = per_seed.iter().map(|r| r[i].1).collect();
        let (m, sd) = mean_sd(&vals);
        view.mean.push(m);
        view.se.push(sd / (seeds as f64).sqrt());
        view.bound.push(theorem1_bound(&problem, 1, eta, &theta0, nk).map_err(|e| e.to_string())?);
    }
    Ok(view)
}

/// Strong error of Gaussian MSGD against the fine SDE path on the ridge problem.
pub fn strong_error(etas: &[f64], trials: usize, seed: u64) -> Result<StrongErrorView, String> {
    let problem = ridge_test_problem(10, 0.1, &mut derive_stream(seed, "web/sde/data")).map_err(|e| e.to_string())?;
    let curve = strong_error_curve(
        &problem.model,
        &problem.data,
        &problem.theta0,
        etas,
        64,
        1.0,
        4,
        trials,
        &derive_stream(seed, "web/sde/trials"),
    )
    .map_err(|e| e.to_string())?;
    Ok(StrongErrorView {
        eta: curve.points.iter().map(|p| p.eta).collect(),
        error: curve.points.iter().map(|p| p.mean_max_sq_error).collect(),
        slope: curve.fit.map_or(f64::NAN, |f| f.slope),
    })
}

/// Serializes a view, passing errors through.
pub fn json<T: Serialize>(r: Result<T, String>) -> Result<String, String> {
    r.map(|v| serde_json::to_string(&v).expect("views serialize"))
}

#[cfg(target_arch = "wasm32")]
mod bindings {
    use wasm_bindgen::prelude::*;

    fn js(r: Result<String, String>) -> Result<String, JsError> {
        r.map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen]
    pub fn covariance_json(kind: &str, n: usize, b: usize, big_b: usize, draws: usize, seed: u32) -> Result<String, JsError> {
        js(super::json(super::covariance(kind, n, b, big_b, draws, seed.into())))
    }

    #[wasm_bindgen]
    pub fn excess_risk_json(kind: &str, big_b: usize, eta: f64, n: usize, seeds: usize, seed: u32) -> Result<String, JsError> {
        js(super::json(super::excess_risk(kind, big_b, eta, n, seeds, seed.into())))
    }

    #[wasm_bindgen]
    pub fn strong_error_json(etas: Vec<f64>, trials: usize, seed: u32) -> Result<String, JsError> {
        js(super::json(super::strong_error(&etas, trials, seed.into())))
    }
}
