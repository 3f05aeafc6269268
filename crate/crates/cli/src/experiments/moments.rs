use msgd::noise::{
    empirical_moments, matrix_to_csv, theoretical_sampling_cov, SamplingKind, SamplingSpec,
};
use msgd::par::map_indexed;
use msgd::rng::derive_stream;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{Assertion, CliError, ExperimentOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsParams {
    #[serde(default = "all_kinds")]
    pub kinds: Vec<SamplingKind>,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_b")]
    pub b: usize,
    /// Outer batch for the kinds that need one.
    #[serde(default = "d_big_b", rename = "B")]
    pub big_b: usize,
    #[serde(default = "d_draws")]
    pub draws: usize,
    /// Bound on the Frobenius-relative covariance deviation.
    #[serde(default = "d_tol")]
    pub cov_tol: f64,
}

fn all_kinds() -> Vec<SamplingKind> {
    SamplingKind::ALL.to_vec()
}
fn d_n() -> usize {
    10
}
fn d_b() -> usize {
    3
}
fn d_big_b() -> usize {
    6
}
fn d_draws() -> usize {
    100_000
}
fn d_tol() -> f64 {
    0.05
}

impl Default for MomentsParams {
    fn default() -> Self {
        MomentsParams {
            kinds: all_kinds(),
            n: d_n(),
            b: d_b(),
            big_b: d_big_b(),
            draws: d_draws(),
            cov_tol: d_tol(),
        }
    }
}

impl MomentsParams {
    pub fn spec(&self, kind: SamplingKind) -> Result<SamplingSpec, CliError> {
        let spec = if kind.needs_outer_size() {
            SamplingSpec::with_outer(kind, self.n, self.b, self.big_b)
        } else {
            SamplingSpec::new(kind, self.n, self.b)
        };
        spec.map_err(CliError::config)
    }
}

pub fn moments(seed: u64, p: &MomentsParams) -> Result<ExperimentOutput, CliError> {
    if p.kinds.is_empty() {
        return Err(CliError::config("moments needs at least one kind"));
    }
    let specs = p
        .kinds
        .iter()
        .map(|&k| p.spec(k))
        .collect::<Result<Vec<_>, _>>()?;
    for spec in &specs {
        // Validate draw count and spec before fanning out.
        theoretical_sampling_cov(spec).map_err(CliError::config)?;
    }
    if p.draws < msgd::noise::MIN_MOMENT_DRAWS {
        return Err(CliError::config(format!(
            "draws must be at least {}",
            msgd::noise::MIN_MOMENT_DRAWS
        )));
    }
    let labels: Vec<String> = specs.iter().map(|s| format!("moments/{}", s.kind)).collect();
    let reports = map_indexed(specs.len(), |i| {
        empirical_moments(&specs[i], &mut derive_stream(seed, &labels[i]), p.draws)
            .expect("validated above")
    });

    let mut csv = String::from(
        "kind,n,b,B,draws,max_abs_mean_dev,max_mean_z,mean_within_tolerance,\
         frob_rel_cov_dev,frob_rel_cov_dev_vs_sgd\n",
    );
    let mut extra = Vec::new();
    let mut assertions = Vec::new();
    for r in &reports {
        let s = &r.spec;
        let big = s.big_b.map_or(String::new(), |v| v.to_string());
        let vs_sgd = r.frob_rel_cov_dev_vs_sgd.map_or(String::new(), |v| v.to_string());
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            s.kind,
            s.n,
            s.b,
            big,
            r.draw_count,
            r.max_abs_mean_dev,
            r.max_mean_z,
            r.mean_within_tolerance,
            r.frob_rel_cov_dev,
            vs_sgd
        ));
        extra.push((
            format!("cov_{}.csv", s.kind),
            matrix_to_csv(&r.empirical_cov_matrix()),
        ));
        extra.push((
            format!("theory_{}.csv", s.kind),
            matrix_to_csv(&theoretical_sampling_cov(s).expect("validated")),
        ));
        assertions.push(Assertion::new(
            format!("{}_mean_max_z", s.kind),
            r.max_mean_z,
            "<= 4",
            r.mean_within_tolerance,
        ));
        assertions.push(Assertion::new(
            format!("{}_frob_rel_cov_dev", s.kind),
            r.frob_rel_cov_dev,
            format!("< {}", p.cov_tol),
            r.frob_rel_cov_dev < p.cov_tol,
        ));
        if let Some(v) = r.frob_rel_cov_dev_vs_sgd {
            // The sparse-Gaussian kind matches only the diagonal of the SGD covariance.
            assertions.push(
                Assertion::new(format!("{}_frob_rel_cov_dev_vs_sgd", s.kind), v, "reported", true)
                    .reported(),
            );
        }
    }
    Ok(ExperimentOutput {
        results_csv: csv,
        extra_files: extra,
        assertions,
        stream_labels: labels,
        derived: json!({ "reports": reports }),
    })
}
