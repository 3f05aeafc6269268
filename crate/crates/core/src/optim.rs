//! Optimizer loops.
//!
//! Every loop takes steps `θ ← θ − η·g`, where `g` is the gradient of a
//! randomly weighted loss. For MSGD (`run_msgd`) the weights are a fresh
//! sampling vector over all `n` losses. For mini-batch MSGD
//! (`run_minibatch_msgd`) they are `(1/B)𝟙 + scale·V` over a uniformly drawn
//! batch of `B`. The additive baselines (`run_gld`) use the full gradient and
//! add Gaussian noise whose size is fixed from the SGD covariance.
//!
//! Trajectories are evaluated every `eval_every` steps. The divergence guard
//! compares the training loss at those points with `10^6×` the initial loss;
//! a non-finite parameter aborts at the step where it appears.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{
    accuracy, full_grad, full_loss, sgd_covariance, Dataset, Model, ModelError, Rows,
};
use crate::noise::{
    draw_sampling_vector, theoretical_sampling_cov, to_noise, NoiseError, SamplingSpec,
};
use crate::rng::RngStream;

pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GldMode {
    /// Variance `tr(C)/d` on every coordinate.
    Isotropic,
    /// Variance `C_jj` on coordinate `j`.
    Diag,
}

/// Where the randomness of a step comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NoiseConfig {
    /// `V ≡ 0`: full-batch gradient descent.
    Zero,
    /// MSGD with a sampling vector over all losses.
    Sampling { spec: SamplingSpec },
    /// Mini-batch MSGD over a uniform batch of `batch` samples.
    MiniBatch {
        batch: usize,
        #[serde(default)]
        inner: Option<SamplingSpec>,
        #[serde(default = "one")]
        scale: f64,
    },
    /// Additive Gaussian noise sized from the batch-`b` SGD covariance.
    Gld { mode: GldMode, b: usize },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub eta: f64,
    pub steps: usize,
    pub noise: NoiseConfig,
    pub eval_every: usize,
    pub seed_label: String,
    /// Also keep the running average of the iterates.
    #[serde(default)]
    pub average: bool,
}

impl OptimizerConfig {
    pub fn validate(&self, n: usize) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::InvalidConfig(m));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        match &self.noise {
            NoiseConfig::Zero => {}
            NoiseConfig::Sampling { spec } => {
                spec.validate()?;
                if spec.kind.weights_outer_batch() {
                    if spec.len() > n {
                        return bad(format!("outer batch {} exceeds n = {n}", spec.len()));
                    }
                } else if spec.n != n {
                    return bad(format!("spec.n = {} but the dataset has {n} samples", spec.n));
                }
            }
            NoiseConfig::MiniBatch {
                batch,
                inner,
                scale,
            } => {
                if *batch == 0 || *batch > n {
                    return bad(format!("need 1 <= B <= n, got B = {batch}, n = {n}"));
                }
                if !scale.is_finite() {
                    return bad("scale must be finite".into());
                }
                if let Some(spec) = inner {
                    spec.validate()?;
                    if spec.len() != *batch {
                        return bad(format!(
                            "inner noise has length {} but the batch is {batch}",
                            spec.len()
                        ));
                    }
                }
            }
            NoiseConfig::Gld { b, .. } => {
                if *b == 0 || *b > n {
                    return bad(format!("need 1 <= b <= n, got b = {b}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { iter: usize, train_loss: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `floor(steps/eval_every) + 1` records unless the run diverged.
    pub records: Vec<EvalRecord>,
    pub theta: DVector<f64>,
    pub theta_bar: Option<DVector<f64>>,
    pub status: RunStatus,
    pub seed: u64,
    pub stream_label: String,
}

impl Trajectory {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    pub fn last(&self) -> &EvalRecord {
        self.records.last().expect("trajectory has the initial record")
    }

    /// `iter,train_loss,test_loss,test_acc`; absent values are left empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut out = String::from("iter,train_loss,test_loss,test_acc\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.iter,
                r.train_loss,
                opt(r.test_loss),
                opt(r.test_acc)
            ));
        }
        out
    }
}

/// `∇(Lcal(θ)·W)` for one fresh draw of `W ∼ spec`.
///
/// For the outer-batch kinds, `B = spec.len()` samples are first drawn
/// uniformly without replacement and `W` weights those.
pub fn msgd_direction<M: Model + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    data: &Dataset,
    spec: &SamplingSpec,
    s: &mut RngStream,
) -> DVector<f64> {
    if spec.kind.weights_outer_batch() {
        let rows = s.choose_distinct(data.len(), spec.len());
        let w = draw_sampling_vector(spec, s);
        return model.weighted_grad(theta, data, Rows::Subset(&rows), &w.weights);
    }
    let w = draw_sampling_vector(spec, s).weights;
    let nonzero: Vec<usize> = (0..w.len()).filter(|&i| w[i] != 0.0).collect();
    if nonzero.len() == w.len() {
        model.weighted_grad(theta, data, Rows::All, &w)
    } else {
        let packed: Vec<f64> = nonzero.iter().map(|&i| w[i]).collect();
        model.weighted_grad(theta, data, Rows::Subset(&nonzero), &packed)
    }
}

/// Gradient of `Σ_r ((1/B) + scale·V_r) ℓ_{k_r}` over a uniform batch `k_1..k_B`.
pub fn minibatch_direction<M: Model + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    data: &Dataset,
    batch: usize,
    inner: Option<&SamplingSpec>,
    scale: f64,
    s: &mut RngStream,
) -> DVector<f64> {
    let rows = s.choose_distinct(data.len(), batch);
    let base = 1.0 / batch as f64;
    let weights: Vec<f64> = match inner {
        Some(spec) if scale != 0.0 => to_noise(&draw_sampling_vector(spec, s))
            .values
            .into_iter()
            .map(|v| base + scale * v)
            .collect(),
        _ => vec![base; batch],
    };
    model.weighted_grad(theta, data, Rows::Subset(&rows), &weights)
}

/// Scale on the inner noise that restores the batch-`b` SGD covariance at a
/// stationary point, assuming the inner covariance is a multiple of `I`.
///
/// A uniform batch of `B` out of `n` contributes `(n−B)/(B(n−1))·F`; inner
/// noise with covariance `v·I` contributes `scale²·v·B·F`. The target is `F/b`.
pub fn compensation_scale(
    inner: &SamplingSpec,
    n: usize,
    big_b: usize,
    b: usize,
) -> Result<f64, OptimError> {
    if b == 0 || big_b == 0 || big_b > n {
        return Err(OptimError::InvalidConfig(format!(
            "need 1 <= b and 1 <= B <= n, got b = {b}, B = {big_b}, n = {n}"
        )));
    }
    let cov = theoretical_sampling_cov(inner)?;
    let v = cov.diagonal().mean();
    let batch_part = if n > 1 {
        (n - big_b) as f64 / (big_b as f64 * (n as f64 - 1.0))
    } else {
        0.0
    };
    let target = 1.0 / b as f64 - batch_part;
    if target <= 0.0 || v <= 0.0 {
        return Ok(0.0);
    }
    Ok((target / (v * big_b as f64)).sqrt())
}

/// Per-coordinate standard deviations of the GLD noise at `θ`.
pub fn gld_noise_sd<M: Model + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    data: &Dataset,
    b: usize,
    mode: GldMode,
) -> Result<Vec<f64>, ModelError> {
    let c = sgd_covariance(model, theta, data, b)?.matrix;
    let d = c.nrows();
    Ok(match mode {
        GldMode::Isotropic => vec![(c.trace().max(0.0) / d as f64).sqrt(); d],
        GldMode::Diag => c.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
    })
}

pub fn run_msgd<M: Model + ?Sized>(
    model: &M,
    theta0: &DVector<f64>,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &OptimizerConfig,
    s: &mut RngStream,
) -> Result<Trajectory, OptimError> {
    match &config.noise {
        NoiseConfig::Zero => run_loop(model, theta0, train, test, config, s, |th, _, _| {
            Ok(model.weighted_grad(th, train, Rows::All, &vec![1.0 / train.len() as f64; train.len()]))
        }),
        NoiseConfig::Sampling { spec } => {
            let spec = *spec;
            run_loop(model, theta0, train, test, config, s, move |th, _, s| {
                Ok(msgd_direction(model, th, train, &spec, s))
            })
        }
        other => Err(OptimError::InvalidConfig(format!(
            "run_msgd needs zero or sampling noise, got {other:?}"
        ))),
    }
}

pub fn run_minibatch_msgd<M: Model + ?Sized>(
    model: &M,
    theta0: &DVector<f64>,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &OptimizerConfig,
    s: &mut RngStream,
) -> Result<Trajectory, OptimError> {
    let NoiseConfig::MiniBatch {
        batch,
        inner,
        scale,
    } = config.noise.clone()
    else {
        return Err(OptimError::InvalidConfig(
            "run_minibatch_msgd needs mini-batch noise".into(),
        ));
    };
    run_loop(model, theta0, train, test, config, s, move |th, _, s| {
        Ok(minibatch_direction(
            model,
            th,
            train,
            batch,
            inner.as_ref(),
            scale,
            s,
        ))
    })
}

/// Gradient descent plus `η·ξ`; the noise size is recomputed at every
/// evaluation point and held fixed in between.
pub fn run_gld<M: Model + ?Sized>(
    model: &M,
    theta0: &DVector<f64>,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &OptimizerConfig,
    s: &mut RngStream,
) -> Result<Trajectory, OptimError> {
    let NoiseConfig::Gld { mode, b } = config.noise else {
        return Err(OptimError::InvalidConfig("run_gld needs GLD noise".into()));
    };
    let eval_every = config.eval_every;
    let mut sd: Vec<f64> = Vec::new();
    run_loop(model, theta0, train, test, config, s, move |th, k, s| {
        if k % eval_every == 0 {
            sd = gld_noise_sd(model, th, train, b, mode)?;
        }
        let mut g = full_grad(model, th, train)?;
        for (gj, sj) in g.iter_mut().zip(&sd) {
            *gj -= sj * s.next_gaussian();
        }
        Ok(g)
    })
}

/// Shared loop. `direction(θ_k, k, s)` returns `g` in `θ_{k+1} = θ_k − η·g`.
fn run_loop<M, F>(
    model: &M,
    theta0: &DVector<f64>,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &OptimizerConfig,
    s: &mut RngStream,
    mut direction: F,
) -> Result<Trajectory, OptimError>
where
    M: Model + ?Sized,
    F: FnMut(&DVector<f64>, usize, &mut RngStream) -> Result<DVector<f64>, OptimError>,
{
    config.validate(train.len())?;
    model.check(theta0, train)?;
    if let Some(t) = test {
        model.check(theta0, t)?;
    }
    let evaluate = |theta: &DVector<f64>, iter: usize| -> Result<EvalRecord, OptimError> {
        Ok(EvalRecord {
            iter,
            train_loss: full_loss(model, theta, train)?,
            test_loss: test.map(|t| full_loss(model, theta, t)).transpose()?,
            test_acc: test.and_then(|t| accuracy(model, theta, t)),
        })
    };

    let mut theta = theta0.clone();
    let mut theta_bar = config.average.then(|| theta0.clone());
    let first = evaluate(&theta, 0)?;
    let limit = if first.train_loss > 0.0 {
        DIVERGENCE_FACTOR * first.train_loss
    } else {
        f64::INFINITY
    };
    let mut records = vec![first];
    let mut status = RunStatus::Completed;

    for k in 0..config.steps {
        let g = direction(&theta, k, s)?;
        theta.axpy(-config.eta, &g, 1.0);
        let iter = k + 1;
        if theta.iter().any(|v| !v.is_finite()) {
            status = RunStatus::Diverged {
                iter,
                train_loss: f64::NAN,
            };
            break;
        }
        if let Some(bar) = theta_bar.as_mut() {
            let kf = iter as f64;
            bar.zip_apply(&theta, |b, t| *b = (kf * *b + t) / (kf + 1.0));
        }
        if iter % config.eval_every == 0 {
            let rec = evaluate(&theta, iter)?;
            if !(rec.train_loss <= limit) {
                status = RunStatus::Diverged {
                    iter,
                    train_loss: rec.train_loss,
                };
                records.push(rec);
                break;
            }
            records.push(rec);
        }
    }

    Ok(Trajectory {
        records,
        theta,
        theta_bar,
        status,
        seed: s.root_seed(),
        stream_label: s.label().to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{gradient_matrix, LinearRegression, LogisticRegression};
    use crate::noise::SamplingKind;
    use crate::rng::derive_stream;
    use crate::stats::{frob_rel_dist, mean_sd, CLT_SIGMAS};
    use nalgebra::DMatrix;

    fn regression_data(n: usize, p: usize, seed: u64) -> Dataset {
        let mut s = derive_stream(seed, "data");
        let inputs = s.gaussian_vec(n * p);
        let targets = (0..n)
            .map(|i| inputs[i * p] - 0.5 * inputs[i * p + p - 1] + 0.3 * s.next_gaussian())
            .collect();
        Dataset::new(p, inputs, targets).unwrap()
    }

    fn config(noise: NoiseConfig, eta: f64, steps: usize) -> OptimizerConfig {
        OptimizerConfig {
            eta,
            steps,
            noise,
            eval_every: 1,
            seed_label: "t".into(),
            average: false,
        }
    }

    /// OLS solution: the point where the full gradient of ½(xᵀθ − y)² vanishes.
    fn ols(data: &Dataset) -> DVector<f64> {
        let x = DMatrix::from_row_slice(data.len(), data.p, &data.inputs);
        let y = DVector::from_column_slice(&data.targets);
        let xt = x.transpose();
        (&xt * &x).cholesky().unwrap().solve(&(xt * y))
    }

    #[test]
    fn zero_noise_descends_monotonically() {
        let data = regression_data(40, 3, 1);
        let model = LinearRegression::new(3);
        let lmax = {
            let x = DMatrix::from_row_slice(40, 3, &data.inputs);
            (x.transpose() * x / 40.0).symmetric_eigenvalues().max()
        };
        let cfg = config(NoiseConfig::Zero, 1.0 / lmax, 50);
        let traj = run_msgd(&model, &DVector::zeros(3), &data, None, &cfg, &mut derive_stream(1, "gd")).unwrap();
        assert_eq!(traj.records.len(), 51);
        assert!(traj
            .records
            .windows(2)
            .all(|w| w[1].train_loss <= w[0].train_loss * (1.0 + 1e-12)));
        assert_eq!(traj.status, RunStatus::Completed);
    }

    #[test]
    fn full_batch_without_replacement_is_gd() {
        let data = regression_data(12, 3, 2);
        let model = LinearRegression::new(3);
        let theta0 = DVector::from_vec(vec![0.3, -0.2, 1.0]);
        let gd = run_msgd(&model, &theta0, &data, None, &config(NoiseConfig::Zero, 0.1, 30), &mut derive_stream(5, "a")).unwrap();
        let spec = SamplingSpec::new(SamplingKind::SgdWithoutReplacement, 12, 12).unwrap();
        let msgd = run_msgd(&model, &theta0, &data, None, &config(NoiseConfig::Sampling { spec }, 0.1, 30), &mut derive_stream(5, "a")).unwrap();
        assert_eq!(gd.theta, msgd.theta);
        assert_eq!(gd.records, msgd.records);
    }

    #[test]
    fn record_count_follows_eval_cadence() {
        let data = regression_data(10, 2, 3);
        let model = LinearRegression::new(2);
        let spec = SamplingSpec::new(SamplingKind::Bernoulli, 10, 3).unwrap();
        let mut cfg = config(NoiseConfig::Sampling { spec }, 0.05, 23);
        cfg.eval_every = 5;
        cfg.average = true;
        let traj = run_msgd(&model, &DVector::zeros(2), &data, None, &cfg, &mut derive_stream(1, "c")).unwrap();
        assert_eq!(traj.records.len(), 23 / 5 + 1);
        assert!(traj.theta_bar.is_some());
        let csv = traj.to_csv();
        assert!(csv.starts_with("iter,train_loss,test_loss,test_acc\n0,"));
        assert!(csv.lines().nth(1).unwrap().ends_with(",,"));
    }

    #[test]
    fn divergence_is_flagged() {
        let data = regression_data(20, 2, 4);
        let model = LinearRegression::new(2);
        let traj = run_msgd(&model, &DVector::from_element(2, 1.0), &data, None, &config(NoiseConfig::Zero, 50.0, 200), &mut derive_stream(1, "d")).unwrap();
        assert!(traj.diverged());
        assert!(traj.records.len() < 201);
    }

    #[test]
    fn config_errors() {
        let data = regression_data(10, 2, 5);
        let model = LinearRegression::new(2);
        let theta = DVector::zeros(2);
        let mut s = derive_stream(1, "e");
        let bad_eta = config(NoiseConfig::Zero, 0.0, 1);
        assert!(matches!(run_msgd(&model, &theta, &data, None, &bad_eta, &mut s), Err(OptimError::InvalidConfig(_))));
        let spec = SamplingSpec::new(SamplingKind::Bernoulli, 9, 3).unwrap();
        let wrong_n = config(NoiseConfig::Sampling { spec }, 0.1, 1);
        assert!(run_msgd(&model, &theta, &data, None, &wrong_n, &mut s).is_err());
        let gld = config(NoiseConfig::Gld { mode: GldMode::Diag, b: 2 }, 0.1, 1);
        assert!(run_msgd(&model, &theta, &data, None, &gld, &mut s).is_err());
        assert!(run_minibatch_msgd(&model, &theta, &data, None, &gld, &mut s).is_err());
        let big = config(NoiseConfig::MiniBatch { batch: 11, inner: None, scale: 1.0 }, 0.1, 1);
        assert!(run_minibatch_msgd(&model, &theta, &data, None, &big, &mut s).is_err());
    }

    fn spec_for(kind: SamplingKind, n: usize) -> SamplingSpec {
        if kind.needs_outer_size() {
            SamplingSpec::with_outer(kind, n, 3, 6).unwrap()
        } else {
            SamplingSpec::new(kind, n, 3).unwrap()
        }
    }

    #[test]
    fn update_directions_are_unbiased() {
        let data = regression_data(10, 3, 6);
        let model = LinearRegression::new(3);
        let theta = DVector::from_vec(vec![0.2, 0.4, -0.3]);
        let grad = full_grad(&model, &theta, &data).unwrap();
        let m = 100_000;
        for kind in SamplingKind::ALL {
            let spec = spec_for(kind, 10);
            let mut s = derive_stream(7, kind.name());
            let draws: Vec<DVector<f64>> = (0..m).map(|_| msgd_direction(&model, &theta, &data, &spec, &mut s)).collect();
            for j in 0..3 {
                let col: Vec<f64> = draws.iter().map(|g| g[j]).collect();
                let (mean, sd) = mean_sd(&col);
                let tol = CLT_SIGMAS * sd / (m as f64).sqrt() + 1e-12;
                assert!((mean - grad[j]).abs() <= tol, "{kind} coord {j}: {mean} vs {}", grad[j]);
            }
        }
    }

    #[test]
    fn gradient_noise_covariance_transfers() {
        let model = LinearRegression::new(3);
        let theta = DVector::from_vec(vec![0.2, 0.4, -0.3]);
        let m = 100_000;
        for kind in SamplingKind::ALL {
            // Outer-batch kinds weight a batch of B; with n = B it is the whole set.
            let n = if kind.weights_outer_batch() { 6 } else { 10 };
            let data = regression_data(n, 3, 8);
            let spec = spec_for(kind, n);
            let g = gradient_matrix(&model, &theta, &data).unwrap().cols;
            let grad = g.column_mean();
            let target = &g * theoretical_sampling_cov(&spec).unwrap() * g.transpose();
            let mut s = derive_stream(9, kind.name());
            let mut cov = DMatrix::<f64>::zeros(3, 3);
            for _ in 0..m {
                let e = msgd_direction(&model, &theta, &data, &spec, &mut s) - &grad;
                cov.ger(1.0, &e, &e, 1.0);
            }
            cov /= m as f64;
            let dev = frob_rel_dist(&cov, &target).unwrap();
            assert!(dev < 0.05, "{kind}: {dev}");
        }
    }

    #[test]
    fn zero_inner_noise_is_large_batch_sgd() {
        let data = regression_data(30, 3, 10);
        let model = LinearRegression::new(3);
        let theta0 = DVector::zeros(3);
        let mb = config(NoiseConfig::MiniBatch { batch: 8, inner: None, scale: 1.0 }, 0.05, 40);
        let a = run_minibatch_msgd(&model, &theta0, &data, None, &mb, &mut derive_stream(3, "lb")).unwrap();
        let spec = SamplingSpec::new(SamplingKind::SgdWithoutReplacement, 30, 8).unwrap();
        let b = run_msgd(&model, &theta0, &data, None, &config(NoiseConfig::Sampling { spec }, 0.05, 40), &mut derive_stream(3, "lb")).unwrap();
        assert!((a.theta - b.theta).norm() < 1e-12);
    }

    #[test]
    fn compensation_scale_cases() {
        let fisher = SamplingSpec::new(SamplingKind::GaussianFisher, 20, 2).unwrap();
        let s = compensation_scale(&fisher, 200, 20, 2).unwrap();
        let expect = (1.0f64 - 2.0 * 180.0 / (20.0 * 199.0)).sqrt();
        assert!((s - expect).abs() < 1e-14);
        // A target batch above B already has less noise than the batch itself.
        let fisher = SamplingSpec::new(SamplingKind::GaussianFisher, 10, 10).unwrap();
        assert_eq!(compensation_scale(&fisher, 100, 10, 20).unwrap(), 0.0);
    }

    #[test]
    fn compensated_minibatch_matches_small_batch_covariance() {
        let (n, big_b, b) = (200, 20, 2);
        let data = regression_data(n, 3, 11);
        let model = LinearRegression::new(3);
        let theta = ols(&data);
        assert!(full_grad(&model, &theta, &data).unwrap().norm() < 1e-10);
        let inner = SamplingSpec::with_outer(SamplingKind::SparseGaussianFisher, big_b, b, big_b).unwrap();
        let scale = compensation_scale(&inner, n, big_b, b).unwrap();
        let target = sgd_covariance(&model, &theta, &data, b).unwrap().matrix;
        let m = 100_000;
        let mut s = derive_stream(12, "comp");
        let mut cov = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..m {
            let e = minibatch_direction(&model, &theta, &data, big_b, Some(&inner), scale, &mut s);
            cov.ger(1.0, &e, &e, 1.0);
        }
        cov /= m as f64;
        let diag = |c: &DMatrix<f64>| DMatrix::from_diagonal(&c.diagonal());
        let dev = frob_rel_dist(&diag(&cov), &diag(&target)).unwrap();
        assert!(dev < 0.10, "diagonal deviation {dev}");
        // Uncompensated large batch is far off.
        let mut cov0 = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..10_000 {
            let e = minibatch_direction(&model, &theta, &data, big_b, None, 0.0, &mut s);
            cov0.ger(1.0, &e, &e, 1.0);
        }
        cov0 /= 10_000.0;
        assert!(frob_rel_dist(&diag(&cov0), &diag(&target)).unwrap() > 0.5);
    }

    #[test]
    fn gld_noise_vanishes_with_zero_gradients() {
        // Noiseless data fitted exactly: every per-sample gradient is zero.
        let mut s = derive_stream(13, "x");
        let inputs = s.gaussian_vec(20);
        let targets = (0..10).map(|i| 2.0 * inputs[2 * i] - inputs[2 * i + 1]).collect();
        let data = Dataset::new(2, inputs, targets).unwrap();
        let model = LinearRegression::new(2);
        let theta = DVector::from_vec(vec![2.0, -1.0]);
        for mode in [GldMode::Isotropic, GldMode::Diag] {
            assert!(gld_noise_sd(&model, &theta, &data, 1, mode).unwrap().iter().all(|&v| v == 0.0));
            let traj = run_gld(&model, &theta, &data, None, &config(NoiseConfig::Gld { mode, b: 1 }, 0.1, 10), &mut s).unwrap();
            assert!((traj.theta - &theta).norm() < 1e-12);
        }
    }

    #[test]
    fn isotropic_gld_noise_energy_matches_trace() {
        let data = regression_data(30, 4, 14);
        let model = LinearRegression::new(4);
        let theta = DVector::from_element(4, 0.1);
        let tr = sgd_covariance(&model, &theta, &data, 3).unwrap().matrix.trace();
        let sd = gld_noise_sd(&model, &theta, &data, 3, GldMode::Isotropic).unwrap();
        let mut s = derive_stream(15, "gld");
        let m = 10_000;
        let energies: Vec<f64> = (0..m)
            .map(|_| sd.iter().map(|v| (v * s.next_gaussian()).powi(2)).sum())
            .collect();
        let (mean, _) = mean_sd(&energies);
        // ‖ξ‖² = (tr/d)·χ²_d has standard deviation tr·√(2/d).
        let tol = CLT_SIGMAS * tr * (2.0f64 / 4.0).sqrt() / (m as f64).sqrt();
        assert!((mean - tr).abs() < tol, "{mean} vs {tr}");
        let diag = gld_noise_sd(&model, &theta, &data, 3, GldMode::Diag).unwrap();
        assert!((diag.iter().map(|v| v * v).sum::<f64>() - tr).abs() < 1e-12 * tr);
    }

    #[test]
    fn logistic_msgd_makes_progress() {
        let mut s = derive_stream(16, "blobs");
        let cd = crate::models::generate_classification_data(&[vec![-2.0, 0.0], vec![2.0, 0.0]], 1.0, 200, 200, &mut s).unwrap();
        let model = LogisticRegression::new(2);
        let spec = SamplingSpec::new(SamplingKind::GaussianCov, 200, 10).unwrap();
        let mut cfg = config(NoiseConfig::Sampling { spec }, 0.5, 200);
        cfg.eval_every = 50;
        let traj = run_msgd(&model, &DVector::zeros(2), &cd.train, Some(&cd.test), &cfg, &mut s).unwrap();
        assert!(traj.last().test_acc.unwrap() > 0.95);
        assert!(traj.last().train_loss < traj.records[0].train_loss);
    }
}
