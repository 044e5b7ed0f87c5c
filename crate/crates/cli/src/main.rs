mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "sde", version, about = "Disentangled state-space forecasting: training, evaluation and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seeds 0..k; overrides `seeds` from the config.
    #[arg(long)]
    seeds: Option<usize>,
    /// Maximum number of seeds run in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Kind {
    Order,
    Semantic,
    #[value(name = "cross_variate", alias = "cross-variate")]
    CrossVariate,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Probe {
    Shuffle,
    Patching,
    Activation,
    Sharpness,
    Mi,
    Ttv,
    Efficiency,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as CSV.
    Generate {
        #[arg(long, value_enum)]
        kind: Kind,
        /// Number of variates.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Innovation or additive noise std; defaults per kind.
        #[arg(long)]
        noise: Option<f64>,
        /// Cross-variate coupling strength.
        #[arg(long)]
        coupling: Option<f64>,
        /// Extra independent Gaussian columns (cross_variate only).
        #[arg(long, default_value_t = 0)]
        noise_variates: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per seed and write checkpoints and histories.
    Train(RunArgs),
    /// Score a checkpoint on the validation and test splits of a config's data.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a diagnostic probe.
    Diagnose {
        #[arg(value_enum)]
        probe: Probe,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Merge probe JSON reports into one CSV table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
