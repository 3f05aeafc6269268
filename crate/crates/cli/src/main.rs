use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msgd_cli::{execute, CliError, ExperimentConfig, EXPERIMENTS};

#[derive(Parser)]
#[command(name = "msgd", version, about = "Multiplicative SGD experiment driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Override the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the available experiments.
    List,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.command {
        Command::List => {
            for (name, about) in EXPERIMENTS {
                println!("{name:<12} {about}");
            }
            ExitCode::SUCCESS
        }
        Command::Run { config, seed, out } => run(config, seed, out),
    }
}

fn run(path: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> ExitCode {
    let mut config = match ExperimentConfig::load(&path) {
        Ok(c) => c,
        Err(e) => return config_error(&e),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(o) = out {
        config.output_dir = Some(o);
    }
    let dir = config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("out/{}-seed{}", config.experiment.name(), config.seed)));
    match execute(&config, &dir) {
        Err(e) => config_error(&e),
        Ok(output) => {
            for a in &output.assertions {
                let tag = match (a.pass, a.enforced) {
                    (true, _) => "ok",
                    (false, true) => "FAIL",
                    (false, false) => "note",
                };
                println!("[{tag}] {} = {} ({})", a.name, a.value, a.threshold);
            }
            println!("wrote {}", dir.display());
            let failed: Vec<_> = output.failures().map(|a| a.name.as_str()).collect();
            if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                eprintln!("assertion failure: {}", failed.join(", "));
                ExitCode::from(1)
            }
        }
    }
}

fn config_error(e: &CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(2)
}
