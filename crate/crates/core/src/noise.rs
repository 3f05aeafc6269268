//! Sampling vectors and sampling noises.
//!
//! A sampling vector `W` weights the per-sample losses; its noise is
//! `V = W − (1/len)·𝟙`. The gradient noise of a multiplicative step is the
//! gradient matrix applied to `V`, so every noise class below can be injected
//! into gradient descent without touching the model.
//!
//! | kind                    | len | `Var[V]`                                  |
//! |-------------------------|-----|-------------------------------------------|
//! | `SgdWithReplacement`    | n   | `(1/(bn)) (I − 𝟙𝟙ᵀ/n)`                    |
//! | `SgdWithoutReplacement` | n   | `((n−b)/(bn(n−1))) (I − 𝟙𝟙ᵀ/n)`           |
//! | `GaussianCov`           | n   | `(1/(bn)) (I − 𝟙𝟙ᵀ/n)`                    |
//! | `GaussianFisher`        | n   | `(1/(bn)) I`                              |
//! | `Bernoulli`             | n   | `((n−b)/(bn²)) I`                         |
//! | `SparseGaussianFisher`  | n   | `(1/(bn))(1 − 1/n) I`                     |
//! | `TheoremSubsample`      | B   | `((B−b)/(bB(B−1))) (I − 𝟙𝟙ᵀ/B)`           |
//! | `TheoremGaussian`       | B   | `((B−b)/(bB(B−1))) (I − 𝟙𝟙ᵀ/B)`           |

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::stats::{frob_rel_dist, CLT_SIGMAS};

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("invalid sampling spec: {0}")]
    InvalidSpec(String),
    #[error("moment estimation needs at least {min} draws, got {got}")]
    TooFewDraws { min: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplingKind {
    SgdWithReplacement,
    SgdWithoutReplacement,
    GaussianCov,
    GaussianFisher,
    Bernoulli,
    SparseGaussianFisher,
    TheoremSubsample,
    TheoremGaussian,
}

impl SamplingKind {
    pub const ALL: [SamplingKind; 8] = [
        SamplingKind::SgdWithReplacement,
        SamplingKind::SgdWithoutReplacement,
        SamplingKind::GaussianCov,
        SamplingKind::GaussianFisher,
        SamplingKind::Bernoulli,
        SamplingKind::SparseGaussianFisher,
        SamplingKind::TheoremSubsample,
        SamplingKind::TheoremGaussian,
    ];

    /// Kinds that weight a fresh outer batch of size `B` instead of all `n` losses.
    pub fn weights_outer_batch(self) -> bool {
        matches!(
            self,
            SamplingKind::TheoremSubsample | SamplingKind::TheoremGaussian
        )
    }

    pub fn needs_outer_size(self) -> bool {
        self.weights_outer_batch() || self == SamplingKind::SparseGaussianFisher
    }

    pub fn name(self) -> &'static str {
        match self {
            SamplingKind::SgdWithReplacement => "SgdWithReplacement",
            SamplingKind::SgdWithoutReplacement => "SgdWithoutReplacement",
            SamplingKind::GaussianCov => "GaussianCov",
            SamplingKind::GaussianFisher => "GaussianFisher",
            SamplingKind::Bernoulli => "Bernoulli",
            SamplingKind::SparseGaussianFisher => "SparseGaussianFisher",
            SamplingKind::TheoremSubsample => "TheoremSubsample",
            SamplingKind::TheoremGaussian => "TheoremGaussian",
        }
    }
}

impl fmt::Display for SamplingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplingKind {
    type Err = NoiseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SamplingKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| NoiseError::InvalidSpec(format!("unknown sampling kind `{s}`")))
    }
}

/// Which sampling distribution to draw from, and over how many losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub kind: SamplingKind,
    /// Number of losses weighted.
    pub n: usize,
    /// Effective (small) batch size.
    pub b: usize,
    /// Outer batch size, for the kinds that use one.
    #[serde(default, rename = "B", skip_serializing_if = "Option::is_none")]
    pub big_b: Option<usize>,
}

impl SamplingSpec {
    pub fn new(kind: SamplingKind, n: usize, b: usize) -> Result<Self, NoiseError> {
        let spec = SamplingSpec {
            kind,
            n,
            b,
            big_b: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_outer(
        kind: SamplingKind,
        n: usize,
        b: usize,
        big_b: usize,
    ) -> Result<Self, NoiseError> {
        let spec = SamplingSpec {
            kind,
            n,
            b,
            big_b: Some(big_b),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Builds a spec for the outer-batch kinds, where only `B` and `b` matter.
    pub fn outer(kind: SamplingKind, big_b: usize, b: usize) -> Result<Self, NoiseError> {
        Self::with_outer(kind, big_b, b, big_b)
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        let bad = |msg: String| Err(NoiseError::InvalidSpec(msg));
        if self.b == 0 {
            return bad("batch size b must be at least 1".into());
        }
        if self.kind.needs_outer_size() {
            let Some(big_b) = self.big_b else {
                return bad(format!("{} needs an outer batch size B", self.kind));
            };
            if self.b > big_b {
                return bad(format!("need b <= B, got b={} B={big_b}", self.b));
            }
        }
        if !self.kind.weights_outer_batch() {
            if self.n == 0 {
                return bad("n must be at least 1".into());
            }
            if self.b > self.n {
                return bad(format!("need b <= n, got b={} n={}", self.b, self.n));
            }
        }
        Ok(())
    }

    /// Length of the sampling vector: `B` for the outer-batch kinds, `n` otherwise.
    pub fn len(&self) -> usize {
        if self.kind.weights_outer_batch() {
            self.big_b.unwrap_or(self.n)
        } else {
            self.n
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn outer_size(&self) -> usize {
        self.big_b.expect("validated spec carries B")
    }
}

/// Random weights over the losses; `E[W] = (1/len)·𝟙`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingVector {
    pub weights: Vec<f64>,
}

/// Zero-mean part of a sampling vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingNoise {
    pub values: Vec<f64>,
}

/// `scale · (I − 𝟙𝟙ᵀ/len)`.
pub fn centering_projector(len: usize, scale: f64) -> DMatrix<f64> {
    let off = -scale / len as f64;
    DMatrix::from_fn(len, len, |i, j| if i == j { scale + off } else { off })
}

/// Closed-form covariance of the sampling noise (equivalently of `W`).
pub fn theoretical_sampling_cov(spec: &SamplingSpec) -> Result<DMatrix<f64>, NoiseError> {
    spec.validate()?;
    let (n, b) = (spec.n as f64, spec.b as f64);
    let cov = match spec.kind {
        SamplingKind::SgdWithReplacement | SamplingKind::GaussianCov => {
            centering_projector(spec.n, 1.0 / (b * n))
        }
        SamplingKind::SgdWithoutReplacement => {
            if spec.b == spec.n {
                DMatrix::zeros(spec.n, spec.n)
            } else {
                centering_projector(spec.n, (n - b) / (b * n * (n - 1.0)))
            }
        }
        SamplingKind::GaussianFisher => DMatrix::identity(spec.n, spec.n) / (b * n),
        SamplingKind::Bernoulli => DMatrix::identity(spec.n, spec.n) * ((n - b) / (b * n * n)),
        SamplingKind::SparseGaussianFisher => {
            DMatrix::identity(spec.n, spec.n) * ((1.0 - 1.0 / n) / (b * n))
        }
        SamplingKind::TheoremSubsample | SamplingKind::TheoremGaussian => {
            let big = spec.outer_size();
            centering_projector(big, outer_weight_scale(big, spec.b))
        }
    };
    Ok(cov)
}

/// `(B−b)/(bB(B−1))`, taken as 0 when `B = b`.
fn outer_weight_scale(big_b: usize, b: usize) -> f64 {
    if big_b == b {
        return 0.0;
    }
    let (bb, b) = (big_b as f64, b as f64);
    (bb - b) / (b * bb * (bb - 1.0))
}

/// `ε − mean(ε)·𝟙`, in place.
fn center(values: &mut [f64]) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    for v in values.iter_mut() {
        *v -= mean;
    }
}

/// Counts of `b` draws with replacement from `0..n`.
fn with_replacement_counts(n: usize, b: usize, s: &mut RngStream) -> Vec<u32> {
    let mut counts = vec![0u32; n];
    for _ in 0..b {
        counts[s.next_below(n)] += 1;
    }
    counts
}

/// One draw of the sampling vector described by `spec`.
///
/// Panics if the spec is invalid; call [`SamplingSpec::validate`] first when
/// the spec comes from user input.
pub fn draw_sampling_vector(spec: &SamplingSpec, s: &mut RngStream) -> SamplingVector {
    if let Err(e) = spec.validate() {
        panic!("{e}");
    }
    let (n, b) = (spec.n, spec.b);
    let bf = b as f64;
    let weights = match spec.kind {
        SamplingKind::SgdWithReplacement => with_replacement_counts(n, b, s)
            .into_iter()
            .map(|k| f64::from(k) / bf)
            .collect(),
        SamplingKind::SgdWithoutReplacement => {
            let mut w = vec![0.0; n];
            for i in s.choose_distinct(n, b) {
                w[i] = 1.0 / bf;
            }
            w
        }
        SamplingKind::GaussianCov | SamplingKind::GaussianFisher => {
            let mut eps = s.gaussian_vec(n);
            if spec.kind == SamplingKind::GaussianCov {
                center(&mut eps);
            }
            let scale = 1.0 / (bf * n as f64).sqrt();
            eps.into_iter()
                .map(|e| 1.0 / n as f64 + scale * e)
                .collect()
        }
        SamplingKind::Bernoulli => {
            let p = bf / n as f64;
            (0..n)
                .map(|_| if s.next_f64() < p { 1.0 / bf } else { 0.0 })
                .collect()
        }
        SamplingKind::SparseGaussianFisher => {
            // sqrt(B/b) · V_sgd(B) ⊙ ε, with V_sgd(B) the with-replacement noise.
            let big = spec.outer_size();
            let counts = with_replacement_counts(n, big, s);
            let amp = (big as f64 / bf).sqrt();
            let inv_n = 1.0 / n as f64;
            counts
                .into_iter()
                .map(|k| {
                    let v = f64::from(k) / big as f64 - inv_n;
                    inv_n + amp * v * s.next_gaussian()
                })
                .collect()
        }
        SamplingKind::TheoremSubsample => {
            let big = spec.outer_size();
            let mut w = vec![0.0; big];
            for i in s.choose_distinct(big, b) {
                w[i] = 1.0 / bf;
            }
            w
        }
        SamplingKind::TheoremGaussian => {
            let big = spec.outer_size();
            let mut eps = s.gaussian_vec(big);
            center(&mut eps);
            let scale = outer_weight_scale(big, b).sqrt();
            eps.into_iter()
                .map(|e| 1.0 / big as f64 + scale * e)
                .collect()
        }
    };
    SamplingVector { weights }
}

pub fn to_noise(w: &SamplingVector) -> SamplingNoise {
    let mean = 1.0 / w.weights.len() as f64;
    SamplingNoise {
        values: w.weights.iter().map(|x| x - mean).collect(),
    }
}

pub fn draw_sampling_noise(spec: &SamplingSpec, s: &mut RngStream) -> SamplingNoise {
    to_noise(&draw_sampling_vector(spec, s))
}

/// Cov- and Fisher-type Gaussian noises from one shared `ε ∼ N(0, I_n)`:
/// `V_C = (ε − mean(ε)·𝟙)/√(bn)` and `V_F = ε/√(bn)`.
pub fn shared_gaussian_noises(
    n: usize,
    b: usize,
    s: &mut RngStream,
) -> (SamplingNoise, SamplingNoise) {
    assert!(n >= 1 && b >= 1, "need n >= 1 and b >= 1");
    let scale = 1.0 / ((b * n) as f64).sqrt();
    let eps = s.gaussian_vec(n);
    let fisher: Vec<f64> = eps.iter().map(|e| e * scale).collect();
    let mut centered = eps;
    center(&mut centered);
    for v in centered.iter_mut() {
        *v *= scale;
    }
    (
        SamplingNoise { values: centered },
        SamplingNoise { values: fisher },
    )
}

/// Monte Carlo moments of the sampling noise against the closed form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentReport {
    pub spec: SamplingSpec,
    pub draw_count: usize,
    pub empirical_mean: Vec<f64>,
    /// Row-major sample covariance.
    pub empirical_cov: Vec<Vec<f64>>,
    pub max_abs_mean_dev: f64,
    /// Largest `|mean_i| / (σ_i / √M)` with `σ_i²` the theoretical variance.
    pub max_mean_z: f64,
    pub mean_within_tolerance: bool,
    pub frob_rel_cov_dev: f64,
    /// For the sparse-Gaussian kind only: deviation from the full
    /// with-replacement SGD covariance `(1/(bn))(I − 𝟙𝟙ᵀ/n)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frob_rel_cov_dev_vs_sgd: Option<f64>,
}

impl MomentReport {
    pub fn empirical_cov_matrix(&self) -> DMatrix<f64> {
        let k = self.empirical_cov.len();
        DMatrix::from_fn(k, k, |i, j| self.empirical_cov[i][j])
    }
}

pub const MIN_MOMENT_DRAWS: usize = 1_000;

pub fn empirical_moments(
    spec: &SamplingSpec,
    s: &mut RngStream,
    draws: usize,
) -> Result<MomentReport, NoiseError> {
    if draws < MIN_MOMENT_DRAWS {
        return Err(NoiseError::TooFewDraws {
            min: MIN_MOMENT_DRAWS,
            got: draws,
        });
    }
    let target = theoretical_sampling_cov(spec)?;
    let len = spec.len();
    let mut sum = DVector::<f64>::zeros(len);
    let mut outer = DMatrix::<f64>::zeros(len, len);
    for _ in 0..draws {
        let v = DVector::from_vec(draw_sampling_noise(spec, s).values);
        sum += &v;
        outer.syger(1.0, &v, &v, 1.0);
    }
    outer.fill_upper_triangle_with_lower_triangle();
    let m = draws as f64;
    let mean = &sum / m;
    let cov = (outer - &mean * mean.transpose() * m) / (m - 1.0);

    let mut max_abs = 0.0f64;
    let mut max_z = 0.0f64;
    let mut within = true;
    for i in 0..len {
        let dev = mean[i].abs();
        let se = (target[(i, i)] / m).sqrt();
        max_abs = max_abs.max(dev);
        if se > 0.0 {
            max_z = max_z.max(dev / se);
        }
        within &= dev <= CLT_SIGMAS * se;
    }
    let rel = |reference: &DMatrix<f64>| {
        if reference.norm() == 0.0 {
            cov.norm()
        } else {
            frob_rel_dist(&cov, reference).expect("same shape")
        }
    };
    let frob_rel_cov_dev = rel(&target);
    let frob_rel_cov_dev_vs_sgd = (spec.kind == SamplingKind::SparseGaussianFisher).then(|| {
        rel(&centering_projector(
            spec.n,
            1.0 / (spec.b as f64 * spec.n as f64),
        ))
    });
    Ok(MomentReport {
        spec: *spec,
        draw_count: draws,
        empirical_mean: mean.iter().copied().collect(),
        empirical_cov: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
        max_abs_mean_dev: max_abs,
        max_mean_z: max_z,
        mean_within_tolerance: within,
        frob_rel_cov_dev,
        frob_rel_cov_dev_vs_sgd,
    })
}

/// Row-major CSV with header `i,j,value`.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::from("i,j,value\n");
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push_str(&format!("{i},{j},{}\n", m[(i, j)]));
        }
    }
    out
}
