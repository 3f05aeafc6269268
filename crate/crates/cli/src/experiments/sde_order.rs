use msgd::rng::derive_stream;
use msgd::sde::{ridge_test_problem, strong_error_curve};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{Assertion, CliError, ExperimentOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeOrderParams {
    /// Number of samples `N` in the ridge problem.
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_l2")]
    pub l2: f64,
    #[serde(default = "d_etas")]
    pub etas: Vec<f64>,
    #[serde(default = "d_m")]
    pub m: usize,
    #[serde(default = "d_horizon")]
    pub horizon: f64,
    #[serde(default = "d_b")]
    pub b: usize,
    #[serde(default = "d_trials")]
    pub trials: usize,
    #[serde(default = "d_slope")]
    pub slope_target: f64,
    #[serde(default = "d_slope_tol")]
    pub slope_tol: f64,
}

fn d_n() -> usize {
    10
}
fn d_l2() -> f64 {
    0.1
}
fn d_etas() -> Vec<f64> {
    vec![0.04, 0.02, 0.01, 0.005]
}
fn d_m() -> usize {
    64
}
fn d_horizon() -> f64 {
    1.0
}
fn d_b() -> usize {
    4
}
fn d_trials() -> usize {
    200
}
fn d_slope() -> f64 {
    2.0
}
fn d_slope_tol() -> f64 {
    0.3
}

impl Default for SdeOrderParams {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

pub fn sde_order(seed: u64, p: &SdeOrderParams) -> Result<ExperimentOutput, CliError> {
    if p.n == 0 || p.etas.len() < 3 {
        return Err(CliError::config("sde-order needs n >= 1 and at least 3 step sizes"));
    }
    let problem = ridge_test_problem(p.n, p.l2, &mut derive_stream(seed, "sde-order/data"))
        .map_err(CliError::config)?;
    let trials = derive_stream(seed, "sde-order/trials");
    let curve = strong_error_curve(
        &problem.model,
        &problem.data,
        &problem.theta0,
        &p.etas,
        p.m,
        p.horizon,
        p.b,
        p.trials,
        &trials,
    )
    .map_err(CliError::config)?;
    let fit = curve.fit.expect("at least three step sizes");

    let mut assertions = vec![Assertion::new(
        "loglog_slope",
        fit.slope,
        format!("{} +/- {}", p.slope_target, p.slope_tol),
        (fit.slope - p.slope_target).abs() <= p.slope_tol,
    )];
    for w in curve.points.windows(2) {
        let ratio = w[0].mean_max_sq_error / w[1].mean_max_sq_error;
        let step = w[0].eta / w[1].eta;
        assertions.push(
            Assertion::new(
                format!("error_ratio_eta{}_over_eta{}", w[0].eta, w[1].eta),
                ratio,
                format!("reported; {:.1} expected for order 1", step * step),
                true,
            )
            .reported(),
        );
    }
    let fit_csv = format!(
        "slope,intercept,slope_stderr,r_squared\n{},{},{},{}\n",
        fit.slope, fit.intercept, fit.slope_stderr, fit.r_squared
    );
    Ok(ExperimentOutput {
        results_csv: curve.to_csv(),
        extra_files: vec![
            ("summary.csv".into(), curve.summary_csv()),
            ("fit.csv".into(), fit_csv),
        ],
        assertions,
        stream_labels: vec![
            "sde-order/data".into(),
            "sde-order/trials/eta{i}/trial{t}".into(),
        ],
        derived: json!({
            "theta_opt": problem.theta_opt.as_slice(),
            "theta0": problem.theta0.as_slice(),
            "fit": fit,
        }),
    })
}
