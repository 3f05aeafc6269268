//! Online least squares with averaged iterates.
//!
//! Data arrive as a stream `x ∼ N(0, Σ)`, `y = xᵀθ* + ε`, and each step uses a
//! fresh batch:
//!
//! ```text
//! θ_{k+1} = θ_k − η Σ_r w_r (x_r x_rᵀ θ_k − y_r x_r)
//! ```
//!
//! Small-batch SGD weights `b` samples by `1/b`. The large-batch variants
//! weight `B` samples with a random vector whose covariance is
//! `((B−b)/(bB(B−1)))(I − 𝟙𝟙ᵀ/B)`, which gives the same second moments of the
//! update as small-batch SGD. The estimator is the running average `θ̄_n` of
//! `θ_0..θ_n`, scored by its exact excess risk `½(θ̄−θ*)ᵀΣ(θ̄−θ*)`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::{draw_sampling_vector, SamplingKind, SamplingSpec};
use crate::rng::RngStream;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("covariance Σ must be symmetric positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(
        "step size violates the stability condition eta < 2b/(R^2 + (b-1)*lambda): \
         eta = {eta}, limit = {limit}"
    )]
    StepTooLarge { eta: f64, limit: f64 },
    #[error("invalid batch sizes: b = {b}, B = {big_b}")]
    InvalidBatch { b: usize, big_b: usize },
    #[error("residual variance must be nonnegative, got {0}")]
    NegativeVariance(f64),
}

/// Well-specified Gaussian linear model and the constants of (A1)–(A3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionProblem {
    pub sigma: DMatrix<f64>,
    pub theta_star: DVector<f64>,
    /// Residual variance σ².
    pub sigma2: f64,
    /// `E[‖x‖² xxᵀ] ⪯ R² Σ`; for Gaussian inputs `R² = tr Σ + 2 λ_max(Σ)`.
    pub r2: f64,
    /// `Σ ⪯ λ I`.
    pub lambda: f64,
    pub lambda_min: f64,
}

impl RegressionProblem {
    pub fn new(
        sigma: DMatrix<f64>,
        theta_star: DVector<f64>,
        sigma2: f64,
    ) -> Result<Self, TheoryError> {
        let p = theta_star.len();
        if sigma.shape() != (p, p) {
            return Err(TheoryError::DimensionMismatch {
                expected: p,
                got: sigma.nrows(),
            });
        }
        if sigma2 < 0.0 || !sigma2.is_finite() {
            return Err(TheoryError::NegativeVariance(sigma2));
        }
        if (&sigma - sigma.transpose()).amax() > 1e-12 * sigma.amax().max(1.0) {
            return Err(TheoryError::NotPositiveDefinite);
        }
        let eig = SymmetricEigen::new(sigma.clone());
        let lambda = eig.eigenvalues.max();
        let lambda_min = eig.eigenvalues.min();
        if !(lambda_min > 0.0) {
            return Err(TheoryError::NotPositiveDefinite);
        }
        let r2 = sigma.trace() + 2.0 * lambda;
        Ok(RegressionProblem {
            sigma,
            theta_star,
            sigma2,
            r2,
            lambda,
            lambda_min,
        })
    }

    /// `Σ = I_p`.
    pub fn isotropic(theta_star: DVector<f64>, sigma2: f64) -> Result<Self, TheoryError> {
        let p = theta_star.len();
        Self::new(DMatrix::identity(p, p), theta_star, sigma2)
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    /// Largest stable step size `2b / (R² + (b−1)λ)`.
    pub fn step_limit(&self, b: usize) -> f64 {
        let b = b as f64;
        2.0 * b / (self.r2 + (b - 1.0) * self.lambda)
    }

    pub fn check_step(&self, b: usize, eta: f64) -> Result<(), TheoryError> {
        let limit = self.step_limit(b);
        if eta > 0.0 && eta < limit {
            Ok(())
        } else {
            Err(TheoryError::StepTooLarge { eta, limit })
        }
    }

    pub fn sampler(&self) -> Option<GaussianSampler> {
        let chol = Cholesky::new(self.sigma.clone())?;
        Some(GaussianSampler {
            chol_l: chol.l(),
            theta_star: self.theta_star.clone(),
            noise_sd: self.sigma2.sqrt(),
        })
    }
}

/// Draws `(x, y)` pairs from a [`RegressionProblem`].
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    chol_l: DMatrix<f64>,
    theta_star: DVector<f64>,
    noise_sd: f64,
}

impl GaussianSampler {
    /// Writes `x` into `x_out` and returns `y`.
    pub fn draw(&self, s: &mut RngStream, x_out: &mut [f64]) -> f64 {
        let p = x_out.len();
        let mut z = [0.0f64; 16];
        let mut heap;
        let z: &mut [f64] = if p <= 16 {
            &mut z[..p]
        } else {
            heap = vec![0.0; p];
            &mut heap
        };
        s.fill_gaussian(z);
        let mut y = 0.0;
        for i in 0..p {
            let mut xi = 0.0;
            for j in 0..=i {
                xi += self.chol_l[(i, j)] * z[j];
            }
            x_out[i] = xi;
            y += xi * self.theta_star[i];
        }
        y + self.noise_sd * s.next_gaussian()
    }
}

/// `f(θ) − f(θ*) = ½(θ−θ*)ᵀΣ(θ−θ*)`.
pub fn excess_risk(theta: &DVector<f64>, problem: &RegressionProblem) -> f64 {
    let e = theta - &problem.theta_star;
    0.5 * e.dot(&(&problem.sigma * &e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OnlineKind {
    /// Batch of `b`, uniform weights `1/b`.
    SmallBatchSgd,
    /// Batch of `B`; `b` of them picked without replacement with weight `1/b`.
    TheoremSubsample,
    /// Batch of `B`; Gaussian weights with the same first two moments.
    TheoremGaussian,
}

impl OnlineKind {
    pub fn name(self) -> &'static str {
        match self {
            OnlineKind::SmallBatchSgd => "SmallBatchSgd",
            OnlineKind::TheoremSubsample => "TheoremSubsample",
            OnlineKind::TheoremGaussian => "TheoremGaussian",
        }
    }
}

/// One averaged-iterate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedRun {
    pub kind: OnlineKind,
    pub big_b: usize,
    pub b: usize,
    pub eta: f64,
    pub n: usize,
    pub seed: u64,
    pub stream_label: String,
    pub theta_bar: DVector<f64>,
    pub theta_last: DVector<f64>,
    /// `(k, excess_risk(θ̄_k))` at each requested checkpoint.
    pub excess_risk: Vec<(usize, f64)>,
}

/// Runs `n` online steps and records the excess risk of `θ̄_k` at `log_at`.
///
/// Fresh samples are generated on the fly. For `TheoremSubsample`, samples
/// that receive zero weight never affect the iterate and are not generated.
#[allow(clippy::too_many_arguments)]
pub fn run_online_recursion(
    problem: &RegressionProblem,
    theta0: &DVector<f64>,
    big_b: usize,
    b: usize,
    eta: f64,
    n: usize,
    kind: OnlineKind,
    log_at: &[usize],
    s: &mut RngStream,
) -> Result<AveragedRun, TheoryError> {
    let p = problem.dim();
    if theta0.len() != p {
        return Err(TheoryError::DimensionMismatch {
            expected: p,
            got: theta0.len(),
        });
    }
    if b == 0 || (kind != OnlineKind::SmallBatchSgd && big_b < b) {
        return Err(TheoryError::InvalidBatch { b, big_b });
    }
    problem.check_step(b, eta)?;
    let sampler = problem.sampler().ok_or(TheoryError::NotPositiveDefinite)?;
    let outer = match kind {
        OnlineKind::SmallBatchSgd => None,
        OnlineKind::TheoremSubsample => Some(
            SamplingSpec::outer(SamplingKind::TheoremSubsample, big_b, b)
                .map_err(|_| TheoryError::InvalidBatch { b, big_b })?,
        ),
        OnlineKind::TheoremGaussian => Some(
            SamplingSpec::outer(SamplingKind::TheoremGaussian, big_b, b)
                .map_err(|_| TheoryError::InvalidBatch { b, big_b })?,
        ),
    };
    let uniform = vec![1.0 / b as f64; b];

    let mut theta = theta0.clone();
    let mut theta_bar = theta0.clone();
    let mut grad = DVector::<f64>::zeros(p);
    let mut x = vec![0.0; p];
    let mut logged = Vec::with_capacity(log_at.len());
    let mut next_log = log_at.iter().copied().peekable();
    while next_log.peek() == Some(&0) {
        logged.push((0, excess_risk(&theta_bar, problem)));
        next_log.next();
    }

    for k in 1..=n {
        grad.fill(0.0);
        let drawn;
        let weights: &[f64] = match &outer {
            None => &uniform,
            Some(spec) => {
                drawn = draw_sampling_vector(spec, s).weights;
                &drawn
            }
        };
        for &w in weights {
            if w == 0.0 {
                continue;
            }
            let y = sampler.draw(s, &mut x);
            let residual = x.iter().zip(theta.iter()).map(|(a, t)| a * t).sum::<f64>() - y;
            let scale = w * residual;
            for (g, xi) in grad.iter_mut().zip(&x) {
                *g += scale * xi;
            }
        }
        theta.axpy(-eta, &grad, 1.0);
        // θ̄_k = (k θ̄_{k−1} + θ_k) / (k + 1)
        let kf = k as f64;
        theta_bar.zip_apply(&theta, |bar, t| *bar = (kf * *bar + t) / (kf + 1.0));
        while next_log.peek() == Some(&k) {
            logged.push((k, excess_risk(&theta_bar, problem)));
            next_log.next();
        }
    }

    Ok(AveragedRun {
        kind,
        big_b: if kind == OnlineKind::SmallBatchSgd { b } else { big_b },
        b,
        eta,
        n,
        seed: s.root_seed(),
        stream_label: s.label().to_owned(),
        theta_bar,
        theta_last: theta,
        excess_risk: logged,
    })
}

/// Constants of the averaged-iterate bound `C1/(n+1) + C2/(n+1)²` on excess risk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub c1: f64,
    pub c2: f64,
}

/// With `κ = (R² + (b−1)λ)/b` and `q = (θ0−θ*)ᵀΣ⁻¹(θ0−θ*)`:
///
/// ```text
/// C1 = σ² d / (2 − ηκ)
/// C2 = (1 + ηκd/2) q / (2η²)
/// ```
///
/// The `1/η²` in `C2` comes from dividing the accumulated noiseless term
/// `(1/(2η) + κd/4) q` by `η(n+1)²/2`.
pub fn bound_constants(
    problem: &RegressionProblem,
    b: usize,
    eta: f64,
    theta0: &DVector<f64>,
) -> Result<BoundConstants, TheoryError> {
    problem.check_step(b, eta)?;
    let d = problem.dim() as f64;
    let kappa = (problem.r2 + (b as f64 - 1.0) * problem.lambda) / b as f64;
    let e0 = theta0 - &problem.theta_star;
    let sigma_inv = problem
        .sigma
        .clone()
        .cholesky()
        .ok_or(TheoryError::NotPositiveDefinite)?
        .inverse();
    let q = e0.dot(&(sigma_inv * &e0));
    Ok(BoundConstants {
        c1: problem.sigma2 * d / (2.0 - eta * kappa),
        c2: (1.0 + eta * kappa * d / 2.0) * q / (2.0 * eta * eta),
    })
}

/// Upper bound on `E f(θ̄_n) − f(θ*)`.
pub fn theorem1_bound(
    problem: &RegressionProblem,
    b: usize,
    eta: f64,
    theta0: &DVector<f64>,
    n: usize,
) -> Result<f64, TheoryError> {
    let c = bound_constants(problem, b, eta, theta0)?;
    let m = n as f64 + 1.0;
    Ok(c.c1 / m + c.c2 / (m * m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;

    fn iso(p: usize, sigma2: f64) -> RegressionProblem {
        RegressionProblem::isotropic(DVector::from_fn(p, |i, _| i as f64 - 1.0), sigma2).unwrap()
    }

    #[test]
    fn constants_for_gaussian_inputs() {
        let pr = iso(4, 0.01);
        assert_eq!(pr.r2, 6.0);
        assert_eq!(pr.lambda, 1.0);
        assert!((pr.step_limit(1) - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_sigma() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(
            RegressionProblem::new(bad, DVector::zeros(2), 0.1),
            Err(TheoryError::NotPositiveDefinite)
        );
        assert!(RegressionProblem::new(DMatrix::identity(3, 3), DVector::zeros(2), 0.1).is_err());
    }

    #[test]
    fn excess_risk_examples() {
        let pr = iso(3, 0.1);
        assert_eq!(excess_risk(&pr.theta_star, &pr), 0.0);
        let mut t = pr.theta_star.clone();
        t[0] += 1.0;
        assert!((excess_risk(&t, &pr) - 0.5).abs() < 1e-15);

        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let pr = RegressionProblem::new(sigma, DVector::zeros(2), 0.0).unwrap();
        // eigenvector (1, 1)/√2 has eigenvalue 3
        let t = DVector::from_vec(vec![1.0, 1.0]) * (0.7 / 2f64.sqrt());
        assert!((excess_risk(&t, &pr) - 0.5 * 3.0 * 0.49).abs() < 1e-14);
    }

    #[test]
    fn noiseless_start_at_optimum_stays_there() {
        let pr = iso(3, 0.0);
        for kind in [
            OnlineKind::SmallBatchSgd,
            OnlineKind::TheoremSubsample,
            OnlineKind::TheoremGaussian,
        ] {
            let run = run_online_recursion(
                &pr,
                &pr.theta_star,
                8,
                2,
                0.05,
                500,
                kind,
                &[0, 10, 500],
                &mut derive_stream(1, kind.name()),
            )
            .unwrap();
            assert!((&run.theta_bar - &pr.theta_star).norm() < 1e-12);
            assert!(run.excess_risk.iter().all(|&(_, e)| e < 1e-24));
            assert_eq!(run.excess_risk.len(), 3);
        }
    }

    #[test]
    fn subsample_with_full_outer_batch_is_uniform_averaging() {
        // B = b: every weight is 1/b, the same recursion as SGD at batch b.
        let pr = iso(3, 0.05);
        let theta0 = DVector::zeros(3);
        let mut s = derive_stream(2, "same");
        let sub = run_online_recursion(
            &pr,
            &theta0,
            4,
            4,
            0.05,
            300,
            OnlineKind::TheoremSubsample,
            &[],
            &mut s.clone(),
        )
        .unwrap();
        // Replay by hand with the same stream: weights draw, then four samples.
        let sampler = pr.sampler().unwrap();
        let spec = SamplingSpec::outer(SamplingKind::TheoremSubsample, 4, 4).unwrap();
        let mut theta = theta0.clone();
        let mut x = vec![0.0; 3];
        for _ in 0..300 {
            let w = draw_sampling_vector(&spec, &mut s).weights;
            assert!(w.iter().all(|&v| v == 0.25));
            let mut g = DVector::zeros(3);
            for wi in w {
                let y = sampler.draw(&mut s, &mut x);
                let xv = DVector::from_column_slice(&x);
                g += &xv * (wi * (xv.dot(&theta) - y));
            }
            theta -= g * 0.05;
        }
        assert!((theta - sub.theta_last).norm() < 1e-12);
    }

    #[test]
    fn running_average_matches_stored_mean() {
        let pr = iso(2, 0.1);
        let theta0 = DVector::from_vec(vec![1.0, -1.0]);
        let mut iterates = vec![theta0.clone()];
        for n in 1..=50 {
            let run = run_online_recursion(
                &pr,
                &theta0,
                1,
                1,
                0.1,
                n,
                OnlineKind::SmallBatchSgd,
                &[],
                &mut derive_stream(3, "avg"),
            )
            .unwrap();
            iterates.push(run.theta_last.clone());
            let mean = iterates.iter().fold(DVector::zeros(2), |acc, t| acc + t) / (n as f64 + 1.0);
            assert!((mean - run.theta_bar).norm() < 1e-12);
        }
    }

    #[test]
    fn step_size_condition_enforced() {
        let pr = iso(4, 0.01);
        let err = run_online_recursion(
            &pr,
            &pr.theta_star,
            1,
            1,
            0.4,
            10,
            OnlineKind::SmallBatchSgd,
            &[],
            &mut derive_stream(1, "x"),
        )
        .unwrap_err();
        assert!(matches!(err, TheoryError::StepTooLarge { .. }));
        assert!(err.to_string().contains("2b/(R^2 + (b-1)*lambda)"));
        assert!(theorem1_bound(&pr, 1, 1.0 / 3.0, &pr.theta_star, 10).is_err());
    }

    #[test]
    fn bound_examples() {
        let pr = iso(4, 0.01);
        let c = bound_constants(&pr, 1, 0.01, &pr.theta_star).unwrap();
        assert_eq!(c.c2, 0.0);
        // C1 = 0.01·4 / (2 − 0.06)
        assert!((c.c1 - 0.04 / 1.94).abs() < 1e-15);
        assert_eq!(
            theorem1_bound(&pr, 1, 0.01, &pr.theta_star, 99).unwrap(),
            c.c1 / 100.0
        );

        let pr0 = iso(4, 0.0);
        let theta0 = &pr0.theta_star + DVector::from_element(4, 0.5);
        let c = bound_constants(&pr0, 1, 0.01, &theta0).unwrap();
        assert_eq!(c.c1, 0.0);
        // q = 1, κ = 6: (1 + 0.01·6·4/2) / (2·1e-4) = 5600
        assert!((c.c2 - 5600.0).abs() < 1e-9);
        let b1 = theorem1_bound(&pr0, 1, 0.01, &theta0, 999).unwrap();
        let b2 = theorem1_bound(&pr0, 1, 0.01, &theta0, 1999).unwrap();
        assert!((b1 / b2 - 4.0).abs() < 1e-12);
    }
}
