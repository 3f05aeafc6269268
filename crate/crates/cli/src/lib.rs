//! Config-driven experiment runner.
//!
//! A run reads one JSON [`ExperimentConfig`], computes the experiment, and
//! writes `results.csv`, any companion CSVs, and `metadata.json` into the
//! output directory. CSV content depends only on the config and seed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod experiments;

pub use experiments::{
    EquivalenceParams, MomentsParams, SdeOrderParams, Theorem1Params, ToyMethod, TrainToyParams,
};

/// Names accepted in the `experiment` field, in `list` order.
pub const EXPERIMENTS: [(&str, &str); 5] = [
    ("moments", "Monte Carlo moments of each sampling-noise kind vs closed form"),
    ("equivalence", "Fisher/Cov identity and shared-noise Cov vs Fisher closeness"),
    ("train-toy", "Gaussian-blob MLP training with MSGD, SGD, mini-batch MSGD and GLD"),
    ("theorem1", "Averaged online least squares: excess risk vs the closed-form bound"),
    ("sde-order", "Strong error of Gaussian MSGD against a fine Euler-Maruyama SDE path"),
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(msg: impl std::fmt::Display) -> Self {
        CliError::Config(msg.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(flatten)]
    pub experiment: Experiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum Experiment {
    Moments(MomentsParams),
    Equivalence(EquivalenceParams),
    TrainToy(TrainToyParams),
    Theorem1(Theorem1Params),
    SdeOrder(SdeOrderParams),
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Moments(_) => "moments",
            Experiment::Equivalence(_) => "equivalence",
            Experiment::TrainToy(_) => "train-toy",
            Experiment::Theorem1(_) => "theorem1",
            Experiment::SdeOrder(_) => "sde-order",
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(CliError::config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// A named check computed by an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub value: f64,
    pub threshold: String,
    pub pass: bool,
    /// Reported-only checks never change the exit status.
    #[serde(default = "yes")]
    pub enforced: bool,
}

fn yes() -> bool {
    true
}

impl Assertion {
    pub fn new(name: impl Into<String>, value: f64, threshold: impl Into<String>, pass: bool) -> Self {
        Assertion {
            name: name.into(),
            value,
            threshold: threshold.into(),
            pass,
            enforced: true,
        }
    }

    pub fn reported(mut self) -> Self {
        self.enforced = false;
        self
    }
}

/// In-memory result of an experiment, before anything touches the disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub results_csv: String,
    /// Companion files as `(file name, contents)`.
    pub extra_files: Vec<(String, String)>,
    pub assertions: Vec<Assertion>,
    /// Stream labels (or label patterns) the run drew from.
    pub stream_labels: Vec<String>,
    /// Experiment-specific derived values for the metadata.
    pub derived: serde_json::Value,
}

impl ExperimentOutput {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.pass || !a.enforced)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Assertion> {
        self.assertions.iter().filter(|a| a.enforced && !a.pass)
    }

    pub fn file(&self, name: &str) -> Option<&str> {
        if name == "results.csv" {
            return Some(&self.results_csv);
        }
        self.extra_files
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_str())
    }
}

#[derive(Debug, Serialize)]
struct Metadata<'a> {
    experiment: &'a str,
    seed: u64,
    generator: &'a str,
    crate_version: &'a str,
    stream_labels: &'a [String],
    config: &'a ExperimentConfig,
    wall_time_seconds: f64,
    passed: bool,
    assertions: &'a [Assertion],
    files: Vec<&'a str>,
    derived: &'a serde_json::Value,
}

/// Computes the experiment without writing anything.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput, CliError> {
    match &config.experiment {
        Experiment::Moments(p) => experiments::moments(config.seed, p),
        Experiment::Equivalence(p) => experiments::equivalence(config.seed, p),
        Experiment::TrainToy(p) => experiments::train_toy(config.seed, p),
        Experiment::Theorem1(p) => experiments::theorem1(config.seed, p),
        Experiment::SdeOrder(p) => experiments::sde_order(config.seed, p),
    }
}

/// Runs the experiment and writes its artifacts into `out_dir`.
pub fn execute(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput, CliError> {
    let start = Instant::now();
    let output = run_experiment(config)?;
    let wall = start.elapsed().as_secs_f64();

    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| CliError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut files = vec!["results.csv"];
    let target = out_dir.join("results.csv");
    fs::write(&target, &output.results_csv).map_err(io(&target))?;
    for (name, contents) in &output.extra_files {
        let target = out_dir.join(name);
        fs::write(&target, contents).map_err(io(&target))?;
        files.push(name);
    }
    files.push("metadata.json");
    let meta = Metadata {
        experiment: config.experiment.name(),
        seed: config.seed,
        generator: msgd::GENERATOR_NAME,
        crate_version: env!("CARGO_PKG_VERSION"),
        stream_labels: &output.stream_labels,
        config,
        wall_time_seconds: wall,
        passed: output.passed(),
        assertions: &output.assertions,
        files,
        derived: &output.derived,
    };
    let target = out_dir.join("metadata.json");
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&target, text + "\n").map_err(io(&target))?;
    Ok(output)
}
