//! Averaged online least squares against the closed-form bound.

use msgd::rng::derive_stream;
use msgd::stats::{intervals_overlap, mean_sd, Z_95};
use msgd::theory::{bound_constants, run_online_recursion, theorem1_bound, OnlineKind, RegressionProblem};
use nalgebra::{DMatrix, DVector};

fn problem() -> RegressionProblem {
    let theta_star = DVector::from_fn(4, |i, _| (-1f64).powi(i as i32) / (i as f64 + 1.0));
    RegressionProblem::new(DMatrix::identity(4, 4), theta_star, 0.01).unwrap()
}

fn mean_risk(
    p: &RegressionProblem,
    theta0: &DVector<f64>,
    kind: OnlineKind,
    big_b: usize,
    n: usize,
    seeds: usize,
    tag: &str,
) -> (f64, f64) {
    let vals: Vec<f64> = (0..seeds)
        .map(|k| {
            let mut s = derive_stream(11, &format!("{tag}/seed{k}"));
            let run = run_online_recursion(p, theta0, big_b, 1, 0.01, n, kind, &[n], &mut s).unwrap();
            run.excess_risk[0].1
        })
        .collect();
    let (m, sd) = mean_sd(&vals);
    (m, sd / (seeds as f64).sqrt())
}

#[test]
fn bias_term_needs_the_inverse_step_squared() {
    let p = problem();
    let theta0 = &p.theta_star + DVector::from_element(4, 1.0);
    let (eta, n) = (0.01, 200);
    let c = bound_constants(&p, 1, eta, &theta0).unwrap();
    // The same constant without the 1/η² factor.
    let c2_short = c.c2 * eta * eta;
    let short = c.c1 / (n + 1) as f64 + c2_short / ((n + 1) as f64).powi(2);
    let full = theorem1_bound(&p, 1, eta, &theta0, n).unwrap();
    let (mean, se) = mean_risk(&p, &theta0, OnlineKind::SmallBatchSgd, 1, n, 20, "bias");
    assert!(mean - 4.0 * se > short, "mean {mean} vs short-constant bound {short}");
    assert!(mean + 2.0 * se < full, "mean {mean} vs bound {full}");
}

#[test]
fn subsample_and_gaussian_recursions_agree_on_average() {
    let p = problem();
    let theta0 = p.theta_star.clone();
    let n = 10_000;
    let a = mean_risk(&p, &theta0, OnlineKind::TheoremSubsample, 16, n, 200, "sub");
    let b = mean_risk(&p, &theta0, OnlineKind::TheoremGaussian, 16, n, 200, "gauss");
    assert!(
        intervals_overlap((a.0, Z_95 * a.1), (b.0, Z_95 * b.1)),
        "subsample {a:?} vs gaussian {b:?}"
    );
}
