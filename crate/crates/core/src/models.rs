//! Objectives with per-sample losses.
//!
//! A [`Model`] exposes two gradient routes that are kept deliberately separate:
//! per-sample gradients (the columns of the gradient matrix `∇Lcal(θ)`) and the
//! gradient of a weighted scalar loss `Lcal(θ)·W`, computed by one backward
//! pass over the batch. Multiplicative SGD only ever needs the second route;
//! the first exists to build covariances and to check the second.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::SamplingVector;
use crate::rng::RngStream;
use crate::theory::RegressionProblem;

/// Largest `d·n` for which the gradient matrix is materialized.
pub const MATERIALIZE_LIMIT: usize = 10_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("gradient matrix of {d}x{n} exceeds the materialization limit")]
    TooLarge { d: usize, n: usize },
    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("classification data needs at least two centers")]
    TooFewCenters,
    #[error("dataset is empty")]
    Empty,
}

/// Inputs (row-major `n×p`) and targets.
///
/// Classification targets are labels in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub p: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(p: usize, inputs: Vec<f64>, targets: Vec<f64>) -> Result<Self, ModelError> {
        if targets.is_empty() {
            return Err(ModelError::Empty);
        }
        if inputs.len() != p * targets.len() {
            return Err(ModelError::DimensionMismatch {
                expected: p * targets.len(),
                got: inputs.len(),
            });
        }
        Ok(Dataset { p, inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.p..(i + 1) * self.p]
    }

    fn input_matrix(&self, rows: Rows<'_>) -> DMatrix<f64> {
        match rows {
            Rows::All => DMatrix::from_row_slice(self.len(), self.p, &self.inputs),
            Rows::Subset(idx) => {
                DMatrix::from_fn(idx.len(), self.p, |r, c| self.inputs[idx[r] * self.p + c])
            }
        }
    }

    /// CSV with header `x_0,..,x_{p-1},y`.
    pub fn to_csv(&self) -> String {
        let mut out: String = (0..self.p).map(|j| format!("x_{j},")).collect();
        out.push_str("y\n");
        for i in 0..self.len() {
            for v in self.row(i) {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{}\n", self.targets[i]));
        }
        out
    }
}

/// Which samples of a dataset a batched computation runs over.
#[derive(Debug, Clone, Copy)]
pub enum Rows<'a> {
    All,
    Subset(&'a [usize]),
}

impl Rows<'_> {
    pub fn count(&self, data: &Dataset) -> usize {
        match self {
            Rows::All => data.len(),
            Rows::Subset(idx) => idx.len(),
        }
    }

    fn index(&self, r: usize) -> usize {
        match self {
            Rows::All => r,
            Rows::Subset(idx) => idx[r],
        }
    }
}

pub trait Model: Send + Sync {
    /// Number of parameters `d`.
    fn dim(&self) -> usize;

    fn input_dim(&self) -> usize;

    /// `ℓ(x; θ)` for one sample.
    fn sample_loss(&self, theta: &DVector<f64>, x: &[f64], y: f64) -> f64;

    /// Writes `∇_θ ℓ(x; θ)` into `out`.
    fn sample_grad(&self, theta: &DVector<f64>, x: &[f64], y: f64, out: &mut [f64]);

    /// Gradient of `Σ_r weights[r] · ℓ(x_{rows[r]}; θ)` by one batched backward pass.
    fn weighted_grad(
        &self,
        theta: &DVector<f64>,
        data: &Dataset,
        rows: Rows<'_>,
        weights: &[f64],
    ) -> DVector<f64>;

    /// Predicted label in `{0, 1}` for classifiers, `None` for regressors.
    fn classify(&self, _theta: &DVector<f64>, _x: &[f64]) -> Option<f64> {
        None
    }

    fn check(&self, theta: &DVector<f64>, data: &Dataset) -> Result<(), ModelError> {
        if theta.len() != self.dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        if data.p != self.input_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim(),
                got: data.p,
            });
        }
        Ok(())
    }
}

/// Length-`n` vector of per-sample losses.
pub fn loss_vector<M: Model + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    data: &Dataset,
) -> Result<Vec<f64>, ModelError> {
    model.check(theta, data)?;
    Ok((0..data.len())
        .map(|i| model.sample_loss(theta, data.row(i), data.targets[i]))
        .collect())
}

/// `L(θ)`, the mean of the loss vector.
pub fn full_loss<M: Model + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    data: &Dataset,
) -> Result<f64, ModelError> {
    let losses = loss_vector(model, theta, data)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// `∇(Lcal(θ)·W)` without forming the gradient matrix.
pub fn weighted_loss_grad<M: Model + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    data: &Dataset,
    w: &SamplingVector,
) -> Result<DVector<f64>, ModelError> {
    model.check(theta, data)?;
    if w.weights.len() != data.len() {
        return Err(ModelError::DimensionMismatch {
            expected: data.len(),
            got: w.weights.len(),
        });
    }
    Ok(model.weighted_grad(theta, data, Rows::All, &w.weights))
}

/// `∇L(θ)`.
pub fn full_grad<M: Model + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    data: &Dataset,
) -> Result<DVector<f64>, ModelError> {
    model.check(theta, data)?;
    let w = vec![1.0 / data.len() as f64; data.len()];
    Ok(model.weighted_grad(theta, data, Rows::All, &w))
}

/// The `d×n` matrix of per-sample gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix {
    pub cols: DMatrix<f64>,
}

impl GradientMatrix {
    pub fn column_mean(&self) -> DVector<f64> {
        self.cols.column_mean()
    }

    /// `∇Lcal(θ) · v`.
    pub fn apply(&self, v: &[f64]) -> DVector<f64> {
        &self.cols * DVector::from_column_slice(v)
    }
}

pub fn gradient_matrix<M: Model + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    data: &Dataset,
) -> Result<GradientMatrix, ModelError> {
    gradient_matrix_rows(model, theta, data, Rows::All)
}

pub fn gradient_matrix_rows<M: Model + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    data: &Dataset,
    rows: Rows<'_>,
) -> Result<GradientMatrix, ModelError> {
    model.check(theta, data)?;
    let (d, n) = (model.dim(), rows.count(data));
    if d.saturating_mul(n) > MATERIALIZE_LIMIT {
        return Err(ModelError::TooLarge { d, n });
    }
    let mut cols = DMatrix::zeros(d, n);
    for (c, mut col) in cols.column_iter_mut().enumerate() {
        let i = rows.index(c);
        model.sample_grad(
            theta,
            data.row(i),
            data.targets[i],
            col.as_mut_slice(),
        );
    }
    Ok(GradientMatrix { cols })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovarianceRole {
    SgdCov,
    Fisher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    pub matrix: DMatrix<f64>,
    pub role: CovarianceRole,
}

/// `C = (1/b)((1/n) G Gᵀ − ∇L ∇Lᵀ)`, the with-replacement SGD covariance.
pub fn sgd_covariance_of(g: &GradientMatrix, b: usize) -> CovarianceMatrix {
    let n = g.cols.ncols() as f64;
    let mean = g.column_mean();
    // Centering first keeps the result positive semidefinite in floating point.
    let mut centered = g.cols.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let matrix = &centered * centered.transpose() / (b as f64 * n);
    CovarianceMatrix {
        matrix,
        role: CovarianceRole::SgdCov,
    }
}

/// `F = (1/n) G Gᵀ`.
pub fn fisher_of(g: &GradientMatrix) -> CovarianceMatrix {
    let n = g.cols.ncols() as f64;
    CovarianceMatrix {
        matrix: &g.cols * g.cols.transpose() / n,
        role: CovarianceRole::Fisher,
    }
}

pub fn sgd_covariance<M: Model + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    data: &Dataset,
    b: usize,
) -> Result<CovarianceMatrix, ModelError> {
    Ok(sgd_covariance_of(&gradient_matrix(model, theta, data)?, b))
}

pub fn fisher<M: Model + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    data: &Dataset,
) -> Result<CovarianceMatrix, ModelError> {
    Ok(fisher_of(&gradient_matrix(model, theta, data)?))
}

/// Fraction of correctly labelled samples, `None` for regressors.
pub fn accuracy<M: Model + ?Sized>(model: &M, theta: &DVector<f64>, data: &Dataset) -> Option<f64> {
    let mut correct = 0usize;
    for i in 0..data.len() {
        let label = model.classify(theta, data.row(i))?;
        if label == data.targets[i] {
            correct += 1;
        }
    }
    Some(correct as f64 / data.len() as f64)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Least squares with optional ridge term: `ℓ = ½(xᵀθ − y)² + (l2/2)‖θ‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearRegression {
    pub p: usize,
    #[serde(default)]
    pub l2: f64,
}

impl LinearRegression {
    pub fn new(p: usize) -> Self {
        LinearRegression { p, l2: 0.0 }
    }

    pub fn ridge(p: usize, l2: f64) -> Self {
        LinearRegression { p, l2 }
    }
}

impl Model for LinearRegression {
    fn dim(&self) -> usize {
        self.p
    }

    fn input_dim(&self) -> usize {
        self.p
    }

    fn sample_loss(&self, theta: &DVector<f64>, x: &[f64], y: f64) -> f64 {
        let r = dot(x, theta.as_slice()) - y;
        0.5 * r * r + 0.5 * self.l2 * theta.norm_squared()
    }

    fn sample_grad(&self, theta: &DVector<f64>, x: &[f64], y: f64, out: &mut [f64]) {
        let r = dot(x, theta.as_slice()) - y;
        for ((o, xi), t) in out.iter_mut().zip(x).zip(theta.iter()) {
            *o = r * xi + self.l2 * t;
        }
    }

    fn weighted_grad(
        &self,
        theta: &DVector<f64>,
        data: &Dataset,
        rows: Rows<'_>,
        weights: &[f64],
    ) -> DVector<f64> {
        let x = data.input_matrix(rows);
        let y = DVector::from_fn(x.nrows(), |r, _| data.targets[rows.index(r)]);
        let w = DVector::from_column_slice(weights);
        let scaled = (&x * theta - y).component_mul(&w);
        x.transpose() * scaled + theta * (self.l2 * w.sum())
    }
}

/// Binary logistic regression on labels in `{0, 1}`: `ℓ = log(1 + e^z) − y z`, `z = xᵀθ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    pub p: usize,
    #[serde(default)]
    pub l2: f64,
}

impl LogisticRegression {
    pub fn new(p: usize) -> Self {
        LogisticRegression { p, l2: 0.0 }
    }
}

impl Model for LogisticRegression {
    fn dim(&self) -> usize {
        self.p
    }

    fn input_dim(&self) -> usize {
        self.p
    }

    fn sample_loss(&self, theta: &DVector<f64>, x: &[f64], y: f64) -> f64 {
        let z = dot(x, theta.as_slice());
        softplus(z) - y * z + 0.5 * self.l2 * theta.norm_squared()
    }

    fn sample_grad(&self, theta: &DVector<f64>, x: &[f64], y: f64, out: &mut [f64]) {
        let g = sigmoid(dot(x, theta.as_slice())) - y;
        for ((o, xi), t) in out.iter_mut().zip(x).zip(theta.iter()) {
            *o = g * xi + self.l2 * t;
        }
    }

    fn weighted_grad(
        &self,
        theta: &DVector<f64>,
        data: &Dataset,
        rows: Rows<'_>,
        weights: &[f64],
    ) -> DVector<f64> {
        let x = data.input_matrix(rows);
        let z = &x * theta;
        let delta = DVector::from_fn(x.nrows(), |r, _| {
            weights[r] * (sigmoid(z[r]) - data.targets[rows.index(r)])
        });
        x.transpose() * delta + theta * (self.l2 * weights.iter().sum::<f64>())
    }

    fn classify(&self, theta: &DVector<f64>, x: &[f64]) -> Option<f64> {
        Some(if dot(x, theta.as_slice()) > 0.0 { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MlpLoss {
    /// `½(z − y)²`.
    Squared,
    /// Binary cross-entropy on the logit `z`.
    CrossEntropy,
}

/// One hidden tanh layer and a scalar output.
///
/// Parameter layout: `W1` (`hidden×p`, row-major), `b1`, `w2`, `b2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub p: usize,
    pub hidden: usize,
    pub loss: MlpLoss,
}

impl Mlp {
    pub fn new(p: usize, hidden: usize, loss: MlpLoss) -> Self {
        Mlp { p, hidden, loss }
    }

    /// Small random initialization scaled by fan-in.
    pub fn init(&self, s: &mut RngStream) -> DVector<f64> {
        let (p, h) = (self.p, self.hidden);
        let mut theta = DVector::zeros(self.dim());
        let in_scale = 1.0 / (p as f64).sqrt();
        let out_scale = 1.0 / (h as f64).sqrt();
        for k in 0..h * p {
            theta[k] = in_scale * s.next_gaussian();
        }
        for k in 0..h {
            theta[h * p + h + k] = out_scale * s.next_gaussian();
        }
        theta
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.hidden * self.p;
        (w1, w1 + self.hidden, w1 + 2 * self.hidden)
    }

    fn hidden_act(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        let (b1, _, _) = self.offsets();
        for (j, o) in out.iter_mut().enumerate() {
            let row = &theta[j * self.p..(j + 1) * self.p];
            *o = (dot(row, x) + theta[b1 + j]).tanh();
        }
    }

    fn output(&self, theta: &[f64], act: &[f64]) -> f64 {
        let (_, w2, b2) = self.offsets();
        dot(&theta[w2..b2], act) + theta[b2]
    }

    fn loss_of(&self, z: f64, y: f64) -> f64 {
        match self.loss {
            MlpLoss::Squared => 0.5 * (z - y) * (z - y),
            MlpLoss::CrossEntropy => softplus(z) - y * z,
        }
    }

    fn dloss(&self, z: f64, y: f64) -> f64 {
        match self.loss {
            MlpLoss::Squared => z - y,
            MlpLoss::CrossEntropy => sigmoid(z) - y,
        }
    }
}

impl Model for Mlp {
    fn dim(&self) -> usize {
        self.hidden * self.p + 2 * self.hidden + 1
    }

    fn input_dim(&self) -> usize {
        self.p
    }

    fn sample_loss(&self, theta: &DVector<f64>, x: &[f64], y: f64) -> f64 {
        let mut act = vec![0.0; self.hidden];
        self.hidden_act(theta.as_slice(), x, &mut act);
        self.loss_of(self.output(theta.as_slice(), &act), y)
    }

    fn sample_grad(&self, theta: &DVector<f64>, x: &[f64], y: f64, out: &mut [f64]) {
        let t = theta.as_slice();
        let (b1, w2, b2) = self.offsets();
        let mut act = vec![0.0; self.hidden];
        self.hidden_act(t, x, &mut act);
        let g = self.dloss(self.output(t, &act), y);
        out[b2] = g;
        for j in 0..self.hidden {
            out[w2 + j] = g * act[j];
            let dh = g * t[w2 + j] * (1.0 - act[j] * act[j]);
            out[b1 + j] = dh;
            for (k, xk) in x.iter().enumerate() {
                out[j * self.p + k] = dh * xk;
            }
        }
    }

    fn weighted_grad(
        &self,
        theta: &DVector<f64>,
        data: &Dataset,
        rows: Rows<'_>,
        weights: &[f64],
    ) -> DVector<f64> {
        let (p, h) = (self.p, self.hidden);
        let (b1, w2, b2) = self.offsets();
        let t = theta.as_slice();
        let x = data.input_matrix(rows);
        let w1 = DMatrix::from_row_slice(h, p, &t[..b1]);
        let bias1 = DVector::from_column_slice(&t[b1..w2]);
        let out_w = DVector::from_column_slice(&t[w2..b2]);

        // Forward: A = tanh(X W1ᵀ + 𝟙 b1ᵀ), z = A w2 + b2.
        let mut act = &x * w1.transpose();
        for mut row in act.row_iter_mut() {
            row += bias1.transpose();
        }
        act.apply(|v| *v = v.tanh());
        let z = &act * &out_w;
        let delta = DVector::from_fn(x.nrows(), |r, _| {
            weights[r] * self.dloss(z[r] + t[b2], data.targets[rows.index(r)])
        });

        // Backward through the weighted scalar loss.
        let g_w2 = act.transpose() * &delta;
        let mut d_hidden = &delta * out_w.transpose();
        d_hidden.zip_apply(&act, |d, a| *d *= 1.0 - a * a);
        let g_w1 = d_hidden.transpose() * &x;
        let g_b1 = d_hidden.row_sum().transpose();

        let mut grad = DVector::zeros(self.dim());
        for j in 0..h {
            for k in 0..p {
                grad[j * p + k] = g_w1[(j, k)];
            }
            grad[b1 + j] = g_b1[j];
            grad[w2 + j] = g_w2[j];
        }
        grad[b2] = delta.sum();
        grad
    }

    fn classify(&self, theta: &DVector<f64>, x: &[f64]) -> Option<f64> {
        let mut act = vec![0.0; self.hidden];
        self.hidden_act(theta.as_slice(), x, &mut act);
        let z = self.output(theta.as_slice(), &act);
        let threshold = match self.loss {
            MlpLoss::CrossEntropy => 0.0,
            MlpLoss::Squared => 0.5,
        };
        Some(if z > threshold { 1.0 } else { 0.0 })
    }
}

/// `n` samples `x ∼ N(0, Σ)`, `y = xᵀθ* + ε`, `ε ∼ N(0, σ²)`.
pub fn generate_regression_data(
    problem: &RegressionProblem,
    n: usize,
    s: &mut RngStream,
) -> Result<Dataset, ModelError> {
    if n == 0 {
        return Err(ModelError::Empty);
    }
    let sampler = problem.sampler().ok_or(ModelError::NotPositiveDefinite)?;
    let p = problem.dim();
    let mut inputs = Vec::with_capacity(n * p);
    let mut targets = Vec::with_capacity(n);
    let mut x = vec![0.0; p];
    for _ in 0..n {
        targets.push(sampler.draw(s, &mut x));
        inputs.extend_from_slice(&x);
    }
    Dataset::new(p, inputs, targets)
}

/// Train and held-out test split of a Gaussian-blob binary task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Balanced blobs: sample `i` is drawn around `centers[i % k]` with isotropic
/// standard deviation `spread` and labelled `(i % k) % 2`.
pub fn generate_classification_data(
    centers: &[Vec<f64>],
    spread: f64,
    n_train: usize,
    n_test: usize,
    s: &mut RngStream,
) -> Result<ClassificationData, ModelError> {
    if centers.len() < 2 {
        return Err(ModelError::TooFewCenters);
    }
    let p = centers[0].len();
    if let Some(bad) = centers.iter().find(|c| c.len() != p) {
        return Err(ModelError::DimensionMismatch {
            expected: p,
            got: bad.len(),
        });
    }
    let mut blobs = |n: usize| -> Result<Dataset, ModelError> {
        let mut inputs = Vec::with_capacity(n * p);
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % centers.len();
            for &mu in &centers[c] {
                inputs.push(mu + spread * s.next_gaussian());
            }
            targets.push((c % 2) as f64);
        }
        Dataset::new(p, inputs, targets)
    };
    let train = blobs(n_train)?;
    let test = blobs(n_test)?;
    Ok(ClassificationData { train, test })
}
