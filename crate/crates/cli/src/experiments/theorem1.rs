use msgd::par::map_indexed;
use msgd::rng::derive_stream;
use msgd::stats::{intervals_overlap, loglog_slope, mean_sd, Z_95};
use msgd::theory::{run_online_recursion, theorem1_bound, OnlineKind, RegressionProblem};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{Assertion, CliError, ExperimentOutput};

/// One excess-risk curve: a recursion kind, its outer batch, and its length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    pub kind: OnlineKind,
    /// Outer batch; ignored for `SmallBatchSgd`.
    #[serde(default, rename = "B")]
    pub big_b: usize,
    /// Iterations; defaults to the experiment's `n`.
    #[serde(default)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Theorem1Params {
    #[serde(default = "d_p")]
    pub p: usize,
    /// Input covariance; identity when absent.
    #[serde(default)]
    pub sigma: Option<Vec<Vec<f64>>>,
    #[serde(default = "d_sigma2")]
    pub sigma2: f64,
    /// Defaults to `θ*_i = (−1)^i / (i + 1)`.
    #[serde(default)]
    pub theta_star: Option<Vec<f64>>,
    /// Defaults to `θ*`.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    #[serde(default = "d_b")]
    pub b: usize,
    #[serde(default = "d_eta")]
    pub eta: f64,
    #[serde(default = "d_seeds")]
    pub seeds: usize,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_curves")]
    pub curves: Vec<CurveSpec>,
    #[serde(default = "d_log_points")]
    pub log_points: Vec<usize>,
    /// `mean + 2·SE ≤ bound_factor · bound` at every logged `n`.
    #[serde(default = "d_bound_factor")]
    pub bound_factor: f64,
    #[serde(default = "d_slope_tol")]
    pub slope_tol: f64,
    /// Logged `n` at which curves must pairwise overlap in 95% CI.
    #[serde(default = "d_overlap_at")]
    pub overlap_at: Vec<usize>,
}

fn d_p() -> usize {
    4
}
fn d_sigma2() -> f64 {
    0.01
}
fn d_b() -> usize {
    1
}
fn d_eta() -> f64 {
    0.01
}
fn d_seeds() -> usize {
    50
}
fn d_n() -> usize {
    100_000
}
fn d_curves() -> Vec<CurveSpec> {
    let tg = |big_b, n| CurveSpec {
        kind: OnlineKind::TheoremGaussian,
        big_b,
        n,
    };
    vec![
        CurveSpec {
            kind: OnlineKind::SmallBatchSgd,
            big_b: 1,
            n: None,
        },
        tg(4, Some(10_000)),
        tg(16, None),
        tg(64, Some(10_000)),
    ]
}
fn d_log_points() -> Vec<usize> {
    vec![1_000, 3_162, 10_000, 31_623, 100_000]
}
fn d_bound_factor() -> f64 {
    1.05
}
fn d_slope_tol() -> f64 {
    0.15
}
fn d_overlap_at() -> Vec<usize> {
    vec![1_000, 10_000]
}

impl Default for Theorem1Params {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl Theorem1Params {
    pub fn problem(&self) -> Result<RegressionProblem, CliError> {
        let p = self.p;
        let sigma = match &self.sigma {
            None => DMatrix::identity(p, p),
            Some(rows) => {
                if rows.len() != p || rows.iter().any(|r| r.len() != p) {
                    return Err(CliError::config(format!("sigma must be {p}x{p}")));
                }
                DMatrix::from_fn(p, p, |i, j| rows[i][j])
            }
        };
        let theta_star = match &self.theta_star {
            None => DVector::from_fn(p, |i, _| (-1f64).powi(i as i32) / (i as f64 + 1.0)),
            Some(v) => DVector::from_column_slice(v),
        };
        RegressionProblem::new(sigma, theta_star, self.sigma2).map_err(CliError::config)
    }

    pub fn theta0(&self, problem: &RegressionProblem) -> Result<DVector<f64>, CliError> {
        match &self.theta0 {
            None => Ok(problem.theta_star.clone()),
            Some(v) if v.len() == problem.dim() => Ok(DVector::from_column_slice(v)),
            Some(v) => Err(CliError::config(format!(
                "theta0 has length {}, expected {}",
                v.len(),
                problem.dim()
            ))),
        }
    }
}

struct CurveStats {
    label: String,
    spec: CurveSpec,
    /// `(n, mean, se)` per logged point.
    points: Vec<(usize, f64, f64)>,
}

pub fn theorem1(seed: u64, p: &Theorem1Params) -> Result<ExperimentOutput, CliError> {
    let problem = p.problem()?;
    problem.check_step(p.b, p.eta).map_err(CliError::config)?;
    let theta0 = p.theta0(&problem)?;
    if p.seeds < 2 || p.curves.is_empty() || p.n == 0 {
        return Err(CliError::config("theorem1 needs seeds >= 2, n >= 1 and at least one curve"));
    }
    for c in &p.curves {
        if c.kind != OnlineKind::SmallBatchSgd && c.big_b < p.b {
            return Err(CliError::config(format!("curve {:?} needs B >= b = {}", c.kind, p.b)));
        }
    }
    let mut log_points = p.log_points.clone();
    log_points.sort_unstable();
    log_points.dedup();

    let mut results = String::from("n,kind,B,b,eta,seed,excess_risk\n");
    let mut curves = Vec::new();
    let mut labels = Vec::new();
    for c in &p.curves {
        let n = c.n.unwrap_or(p.n);
        let logs: Vec<usize> = log_points.iter().copied().filter(|&k| k <= n).collect();
        let big_b = if c.kind == OnlineKind::SmallBatchSgd { p.b } else { c.big_b };
        let label = format!("theorem1/{}/B{big_b}", c.kind.name());
        let runs = map_indexed(p.seeds, |k| {
            run_online_recursion(
                &problem,
                &theta0,
                big_b,
                p.b,
                p.eta,
                n,
                c.kind,
                &logs,
                &mut derive_stream(seed, &format!("{label}/seed{k}")),
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::config)?;
        let mut points = Vec::new();
        for (i, &nk) in logs.iter().enumerate() {
            let vals: Vec<f64> = runs.iter().map(|r| r.excess_risk[i].1).collect();
            for (k, v) in vals.iter().enumerate() {
                results.push_str(&format!(
                    "{nk},{},{big_b},{},{},{k},{v}\n",
                    c.kind.name(),
                    p.b,
                    p.eta
                ));
            }
            let (mean, sd) = mean_sd(&vals);
            points.push((nk, mean, sd / (vals.len() as f64).sqrt()));
        }
        labels.push(format!("{label}/seed{{k}}"));
        curves.push(CurveStats {
            label: format!("{}_B{big_b}", c.kind.name()),
            spec: CurveSpec {
                kind: c.kind,
                big_b,
                n: Some(n),
            },
            points,
        });
    }

    let bound = |n: usize| theorem1_bound(&problem, p.b, p.eta, &theta0, n).expect("step checked");
    let mut bound_csv = String::from("n,bound\n");
    for &n in &log_points {
        bound_csv.push_str(&format!("{n},{}\n", bound(n)));
    }
    let mut summary = String::from("n,kind,B,mean,se,ci95_half,bound,ratio_mean_plus_2se\n");
    let mut assertions = Vec::new();
    for c in &curves {
        let mut worst = 0.0f64;
        for &(n, mean, se) in &c.points {
            let ratio = (mean + 2.0 * se) / bound(n);
            worst = worst.max(ratio);
            summary.push_str(&format!(
                "{n},{},{},{mean},{se},{},{},{ratio}\n",
                c.spec.kind.name(),
                c.spec.big_b,
                Z_95 * se,
                bound(n)
            ));
        }
        assertions.push(Assertion::new(
            format!("{}_max_ratio_mean_plus_2se_to_bound", c.label),
            worst,
            format!("<= {}", p.bound_factor),
            worst <= p.bound_factor,
        ));
    }

    // Rate: only curves whose logged points span at least two decades.
    if p.sigma2 > 0.0 {
        for c in &curves {
            let pts: Vec<(f64, f64)> = c
                .points
                .iter()
                .filter(|(n, ..)| (1_000..=100_000).contains(n))
                .map(|&(n, m, _)| (n as f64, m))
                .collect();
            let span = pts.last().map_or(0.0, |l| l.0) / pts.first().map_or(1.0, |f| f.0);
            if pts.len() < 3 || span < 100.0 {
                continue;
            }
            let slope = loglog_slope(&pts).map_err(CliError::config)?.slope;
            assertions.push(Assertion::new(
                format!("{}_loglog_slope", c.label),
                slope,
                format!("-1 +/- {}", p.slope_tol),
                (slope + 1.0).abs() <= p.slope_tol,
            ));
        }
    }

    // Noise-class irrelevance: pairwise 95% CI overlap.
    for &n in &p.overlap_at {
        let at: Vec<(&str, (f64, f64))> = curves
            .iter()
            .filter_map(|c| {
                c.points
                    .iter()
                    .find(|pt| pt.0 == n)
                    .map(|&(_, m, se)| (c.label.as_str(), (m, Z_95 * se)))
            })
            .collect();
        for i in 0..at.len() {
            for j in i + 1..at.len() {
                let (a, b) = (at[i].1, at[j].1);
                let gap = (a.0 - b.0).abs() / (a.1 + b.1);
                assertions.push(Assertion::new(
                    format!("ci_overlap_n{n}_{}_vs_{}", at[i].0, at[j].0),
                    gap,
                    "<= 1 (|diff| / sum of half-widths)",
                    intervals_overlap(a, b),
                ));
            }
        }
    }

    Ok(ExperimentOutput {
        results_csv: results,
        extra_files: vec![
            ("bound.csv".into(), bound_csv),
            ("summary.csv".into(), summary),
        ],
        assertions,
        stream_labels: labels,
        derived: json!({
            "R2": problem.r2,
            "lambda": problem.lambda,
            "step_limit": problem.step_limit(p.b),
            "bound_constants": msgd::theory::bound_constants(&problem, p.b, p.eta, &theta0)
                .expect("step checked"),
        }),
    })
}
