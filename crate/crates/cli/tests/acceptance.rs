//! One test per acceptance criterion. Each prints a single
//! `[PASS]`/`[FAIL] criterion k: ...` line and then asserts it.
//!
//! Run with `cargo test -p msgd-cli --test acceptance -- --nocapture --test-threads 1`
//! to see the lines in order.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use msgd::models::{
    generate_classification_data, gradient_matrix, weighted_loss_grad, Dataset, LinearRegression,
    LogisticRegression, Mlp, MlpLoss, Model,
};
use msgd::noise::{draw_sampling_vector, theoretical_sampling_cov, SamplingKind, SamplingSpec};
use msgd::rng::derive_stream;
use msgd_cli::{run_experiment, ExperimentConfig, ExperimentOutput};
use nalgebra::{DMatrix, DVector};

// Pinned tolerances and runtime limits.
const ENUM_TOL: f64 = 1e-12;
const ENUM_LIMIT: Duration = Duration::from_secs(1);
const MOMENTS_LIMIT: Duration = Duration::from_secs(30);
const COMMUTE_TOL: f64 = 1e-10;
const COMMUTE_LIMIT: Duration = Duration::from_secs(5);
const THEOREM_LIMIT: Duration = Duration::from_secs(300);
const SDE_LIMIT: Duration = Duration::from_secs(300);
const TOY_LIMIT: Duration = Duration::from_secs(600);
const SEED: u64 = 20240601;

fn verdict(id: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {id}: {detail}");
    assert!(pass, "criterion {id} failed: {detail}");
}

fn config(json: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(json).expect("valid config")
}

fn timed(cfg: &ExperimentConfig) -> (ExperimentOutput, Duration) {
    let start = Instant::now();
    let out = run_experiment(cfg).expect("experiment runs");
    (out, start.elapsed())
}

fn enforced_summary(out: &ExperimentOutput, filter: impl Fn(&str) -> bool) -> (bool, String) {
    let picked: Vec<_> = out
        .assertions
        .iter()
        .filter(|a| a.enforced && filter(&a.name))
        .collect();
    let pass = !picked.is_empty() && picked.iter().all(|a| a.pass);
    let failing: Vec<_> = picked
        .iter()
        .filter(|a| !a.pass)
        .map(|a| format!("{}={:.4} ({})", a.name, a.value, a.threshold))
        .collect();
    let text = if failing.is_empty() {
        format!("{} checks pass", picked.len())
    } else {
        format!("failing: {}", failing.join("; "))
    };
    (pass, text)
}

/// Exact covariance of a finite distribution of weight vectors.
fn exact_cov(outcomes: impl Iterator<Item = (f64, Vec<f64>)>, n: usize) -> DMatrix<f64> {
    let mut mean = DVector::zeros(n);
    let mut second = DMatrix::zeros(n, n);
    for (p, w) in outcomes {
        let w = DVector::from_vec(w);
        mean += &w * p;
        second += &w * w.transpose() * p;
    }
    second - &mean * mean.transpose()
}

#[test]
fn criterion_1_enumeration_exactness() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for n in 1..=6usize {
        for b in 1..=n {
            let bf = b as f64;
            let total = n.pow(b as u32);
            let with = (0..total).map(|mut code| {
                let mut w = vec![0.0; n];
                for _ in 0..b {
                    w[code % n] += 1.0 / bf;
                    code /= n;
                }
                (1.0 / total as f64, w)
            });
            let subsets: Vec<u32> = (0u32..1 << n)
                .filter(|m| m.count_ones() as usize == b)
                .collect();
            let p = 1.0 / subsets.len() as f64;
            let without = subsets.iter().map(|m| {
                let w = (0..n)
                    .map(|i| if m >> i & 1 == 1 { 1.0 / bf } else { 0.0 })
                    .collect();
                (p, w)
            });
            for (kind, got) in [
                (SamplingKind::SgdWithReplacement, exact_cov(with, n)),
                (SamplingKind::SgdWithoutReplacement, exact_cov(without, n)),
            ] {
                let want = theoretical_sampling_cov(&SamplingSpec::new(kind, n, b).unwrap()).unwrap();
                worst = worst.max((&got - &want).amax());
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "1",
        worst <= ENUM_TOL && elapsed < ENUM_LIMIT,
        &format!("max |enumerated - closed form| = {worst:.2e} (<= {ENUM_TOL:e}), {elapsed:.2?} (< {ENUM_LIMIT:?})"),
    );
}

#[test]
fn criterion_2_moment_suite() {
    let (out, elapsed) = timed(&config(&format!(r#"{{"experiment": "moments", "seed": {SEED}}}"#)));
    let (pass, text) = enforced_summary(&out, |_| true);
    verdict(
        "2",
        pass && elapsed < MOMENTS_LIMIT && out.assertions.len() >= 16,
        &format!("8 kinds at n=10 b=3 B=6, 1e5 draws: {text}, {elapsed:.2?} (< {MOMENTS_LIMIT:?})"),
    );
}

fn commutation_residual<M: Model>(model: &M, data: &Dataset, theta: &DVector<f64>, s: &mut msgd::RngStream) -> f64 {
    let n = data.len();
    let spec = SamplingSpec::new(SamplingKind::GaussianFisher, n, 3).unwrap();
    let w = draw_sampling_vector(&spec, s);
    let direct = weighted_loss_grad(model, theta, data, &w).unwrap();
    let via_matrix = gradient_matrix(model, theta, data).unwrap().apply(&w.weights);
    (&direct - &via_matrix).norm() / via_matrix.norm().max(f64::MIN_POSITIVE)
}

#[test]
fn criterion_3_commutation_identity() {
    let start = Instant::now();
    let mut s = derive_stream(SEED, "acceptance/commutation");
    let n = 40;
    let reg = Dataset::new(3, s.gaussian_vec(n * 3), s.gaussian_vec(n)).unwrap();
    let centers = vec![vec![1.0, 1.0], vec![-1.0, -1.0]];
    let cls = generate_classification_data(&centers, 0.8, n, 1, &mut s).unwrap().train;
    let linear = LinearRegression::new(3);
    let logistic = LogisticRegression::new(2);
    let mlp_sq = Mlp::new(3, 6, MlpLoss::Squared);
    let mlp_ce = Mlp::new(2, 6, MlpLoss::CrossEntropy);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let t = DVector::from_vec(s.gaussian_vec(linear.dim()));
        worst = worst.max(commutation_residual(&linear, &reg, &t, &mut s));
        let t = DVector::from_vec(s.gaussian_vec(logistic.dim()));
        worst = worst.max(commutation_residual(&logistic, &cls, &t, &mut s));
        let t = DVector::from_vec(s.gaussian_vec(mlp_sq.dim()));
        worst = worst.max(commutation_residual(&mlp_sq, &reg, &t, &mut s));
        let t = DVector::from_vec(s.gaussian_vec(mlp_ce.dim()));
        worst = worst.max(commutation_residual(&mlp_ce, &cls, &t, &mut s));
    }
    let elapsed = start.elapsed();
    verdict(
        "3",
        worst <= COMMUTE_TOL && elapsed < COMMUTE_LIMIT,
        &format!("max relative residual {worst:.2e} (<= {COMMUTE_TOL:e}) over linear/logistic/MLP x 5 states, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_4_fisher_cov_equivalence() {
    let (out, _) = timed(&config(&format!(r#"{{"experiment": "equivalence", "seed": {SEED}}}"#)));
    let (pass, _) = enforced_summary(&out, |_| true);
    let detail = out
        .assertions
        .iter()
        .map(|a| format!("{}={:.3e} ({})", a.name, a.value, a.threshold))
        .collect::<Vec<_>>()
        .join("; ");
    verdict("4", pass, &detail);
}

fn theorem1_run() -> &'static (ExperimentOutput, Duration) {
    static RUN: OnceLock<(ExperimentOutput, Duration)> = OnceLock::new();
    RUN.get_or_init(|| timed(&config(&format!(r#"{{"experiment": "theorem1", "seed": {SEED}}}"#))))
}

#[test]
fn criterion_5a_excess_risk_under_bound() {
    let (out, elapsed) = theorem1_run();
    let (pass, text) = enforced_summary(out, |n| n.ends_with("_to_bound"));
    verdict(
        "5a",
        pass && *elapsed < THEOREM_LIMIT,
        &format!("mean + 2 SE <= 1.05 x bound at every logged n over 50 seeds: {text}"),
    );
}

#[test]
fn criterion_5b_rate_slope() {
    let (out, elapsed) = theorem1_run();
    let (pass, text) = enforced_summary(out, |n| n.ends_with("_loglog_slope"));
    let slopes = out
        .assertions
        .iter()
        .filter(|a| a.name.ends_with("_loglog_slope"))
        .map(|a| format!("{}={:.3}", a.name, a.value))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        "5b",
        pass && *elapsed < THEOREM_LIMIT,
        &format!("slope -1 +/- 0.15: {slopes}; {text}, {elapsed:.1?} (< {THEOREM_LIMIT:?})"),
    );
}

#[test]
fn criterion_5c_noise_class_overlap() {
    let (out, elapsed) = theorem1_run();
    let (pass, text) = enforced_summary(out, |n| n.starts_with("ci_overlap_"));
    let pairs = out
        .assertions
        .iter()
        .filter(|a| a.name.starts_with("ci_overlap_"))
        .count();
    verdict(
        "5c",
        pass && pairs == 12 && *elapsed < THEOREM_LIMIT,
        &format!("B in {{4,16,64}} and b=1 SGD pairwise 95% CI overlap at n=1e3,1e4 ({pairs} pairs): {text}"),
    );
}

#[test]
fn criterion_6_sde_strong_order() {
    let (out, elapsed) = timed(&config(&format!(r#"{{"experiment": "sde-order", "seed": {SEED}}}"#)));
    let slope = out
        .assertions
        .iter()
        .find(|a| a.name == "loglog_slope")
        .expect("slope assertion");
    verdict(
        "6",
        slope.pass && elapsed < SDE_LIMIT,
        &format!("fitted slope {:.3} (2 +/- 0.3), {elapsed:.1?} (< {SDE_LIMIT:?})", slope.value),
    );
}

#[test]
fn criterion_7_toy_parity() {
    let (out, elapsed) = timed(&config(&format!(r#"{{"experiment": "train-toy", "seed": {SEED}}}"#)));
    let parity = out
        .assertions
        .iter()
        .find(|a| a.name == "parity_spread_sgd_cov_fisher_bernoulli")
        .expect("parity assertion");
    let comp = out
        .assertions
        .iter()
        .find(|a| a.name == "gap_MiniBatchMSGD-x1_vs_SGD")
        .expect("compensation assertion");
    let (all, text) = enforced_summary(&out, |_| true);
    verdict(
        "7",
        all && elapsed < TOY_LIMIT,
        &format!(
            "accuracy spread {:.4}, compensated B=10b gap {:.4} (both <= 0.02); {text}, {elapsed:.1?} (< {TOY_LIMIT:?})",
            parity.value, comp.value
        ),
    );
}

fn all_csv(out: &ExperimentOutput) -> Vec<(String, String)> {
    let mut files = vec![("results.csv".to_string(), out.results_csv.clone())];
    files.extend(out.extra_files.iter().cloned());
    files
}

#[test]
fn criterion_8_determinism() {
    // Reduced sizes of every experiment; each is run twice in-process.
    let configs = [
        r#"{"experiment": "moments", "seed": 7, "draws": 3000}"#,
        r#"{"experiment": "equivalence", "seed": 7, "draws": 200, "states": 2}"#,
        r#"{"experiment": "theorem1", "seed": 7, "seeds": 3, "n": 2000, "log_points": [1000, 2000],
            "curves": [{"kind": "SmallBatchSgd"}, {"kind": "TheoremSubsample", "B": 8}]}"#,
        r#"{"experiment": "sde-order", "seed": 7, "trials": 6, "m": 8}"#,
        r#"{"experiment": "train-toy", "seed": 7, "seeds": 2, "steps": 60, "n_test": 100,
            "n_train": 100, "eval_every": 20}"#,
    ];
    let mut mismatched = Vec::new();
    let mut compared = 0;
    for text in configs {
        let cfg = config(text);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        for ((name, x), (_, y)) in all_csv(&a).iter().zip(all_csv(&b).iter()) {
            compared += 1;
            if x.as_bytes() != y.as_bytes() {
                mismatched.push(format!("{}/{name}", cfg.experiment.name()));
            }
        }
    }

    // The installed binary, twice, into separate directories.
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("moments.json");
    std::fs::write(&cfg_path, configs[0]).unwrap();
    let mut written = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_msgd"))
            .arg("run")
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap()
            .status;
        assert!(status.code().is_some());
        let mut files: Vec<_> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        files.sort();
        written.push(files.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>());
    }
    let binary_same = written[0] == written[1] && !written[0].is_empty();
    verdict(
        "8",
        mismatched.is_empty() && binary_same,
        &format!(
            "{compared} CSV files from 5 experiments byte-identical on rerun (mismatches: {mismatched:?}); binary rerun identical: {binary_same}"
        ),
    );
}
