use msgd::models::{fisher_of, gradient_matrix, sgd_covariance_of, Dataset, Mlp, MlpLoss, Model};
use msgd::noise::shared_gaussian_noises;
use msgd::rng::derive_stream;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::assertions_csv;
use crate::{Assertion, CliError, ExperimentOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivalenceParams {
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_b")]
    pub b: usize,
    #[serde(default = "d_draws")]
    pub draws: usize,
    /// Random MLP states at which the identity is checked.
    #[serde(default = "d_states")]
    pub states: usize,
    #[serde(default = "d_p")]
    pub p: usize,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_identity_tol")]
    pub identity_tol: f64,
}

fn d_n() -> usize {
    400
}
fn d_b() -> usize {
    4
}
fn d_draws() -> usize {
    10_000
}
fn d_states() -> usize {
    5
}
fn d_p() -> usize {
    3
}
fn d_hidden() -> usize {
    8
}
fn d_identity_tol() -> f64 {
    1e-10
}

impl Default for EquivalenceParams {
    fn default() -> Self {
        EquivalenceParams {
            n: d_n(),
            b: d_b(),
            draws: d_draws(),
            states: d_states(),
            p: d_p(),
            hidden: d_hidden(),
            identity_tol: d_identity_tol(),
        }
    }
}

/// Checks `F − b·C − ∇L∇Lᵀ = 0` on an MLP, then compares Cov- and
/// Fisher-type Gaussian noises built from the same `ε`.
pub fn equivalence(seed: u64, p: &EquivalenceParams) -> Result<ExperimentOutput, CliError> {
    if p.n < 2 || p.b == 0 || p.draws == 0 || p.states == 0 || p.p == 0 || p.hidden == 0 {
        return Err(CliError::config(
            "equivalence needs n >= 2 and positive b, draws, states, p, hidden",
        ));
    }
    let mut ds = derive_stream(seed, "equivalence/data");
    let inputs = ds.gaussian_vec(p.n * p.p);
    let targets = (0..p.n)
        .map(|i| inputs[i * p.p].sin() + 0.3 * ds.next_gaussian())
        .collect();
    let data = Dataset::new(p.p, inputs, targets).map_err(CliError::config)?;
    let model = Mlp::new(p.p, p.hidden, MlpLoss::Squared);

    let mut worst = 0.0f64;
    for k in 0..p.states {
        let mut s = derive_stream(seed, &format!("equivalence/state{k}"));
        let theta = model.init(&mut s) + DVector::from_vec(s.gaussian_vec(model.dim())) * 0.3;
        let g = gradient_matrix(&model, &theta, &data).map_err(CliError::config)?;
        let grad = g.column_mean();
        let f = fisher_of(&g).matrix;
        let c = sgd_covariance_of(&g, p.b).matrix;
        let resid = &f - &c * p.b as f64 - &grad * grad.transpose();
        worst = worst.max(resid.amax() / f.amax().max(1.0));
    }

    let mut ns = derive_stream(seed, "equivalence/noise");
    let mut rel_sum = 0.0;
    for _ in 0..p.draws {
        let (vc, vf) = shared_gaussian_noises(p.n, p.b, &mut ns);
        let diff: f64 = vc
            .values
            .iter()
            .zip(&vf.values)
            .map(|(c, f)| (c - f).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = vf.values.iter().map(|f| f * f).sum::<f64>().sqrt();
        rel_sum += diff / norm;
    }
    let rel_mean = rel_sum / p.draws as f64;
    let rel_tol = 2.0 / (p.n as f64).sqrt();

    let assertions = vec![
        Assertion::new(
            "fisher_cov_identity_max_rel_residual",
            worst,
            format!("<= {}", p.identity_tol),
            worst <= p.identity_tol,
        ),
        Assertion::new(
            "mean_rel_dist_cov_vs_fisher_noise",
            rel_mean,
            format!("< {rel_tol}"),
            rel_mean < rel_tol,
        ),
    ];
    Ok(ExperimentOutput {
        results_csv: assertions_csv(&assertions),
        extra_files: vec![],
        assertions,
        stream_labels: vec![
            "equivalence/data".into(),
            "equivalence/state{k}".into(),
            "equivalence/noise".into(),
        ],
        derived: json!({ "model_dim": model.dim(), "rel_tol": rel_tol }),
    })
}
