//! Batch experiment driver: `distest <fim|bounds|allocate|simulate>`.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("invariant violated, nothing written: {0}")]
    Invariant(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<distest::Error> for AppError {
    fn from(e: distest::Error) -> Self {
        AppError::Solver(e.to_string())
    }
}

impl AppError {
    fn exit_code(&self) -> u8 {
        match self {
            AppError::Config(_) => 2,
            AppError::Solver(_) => 3,
            AppError::Invariant(_) => 4,
            AppError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "distest", version, about = "Power-constrained distributed estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// tr(J), log₂|J| and the J₀, J^ideal baselines versus total power.
    Fim(Common),
    /// tr(CRB), tr(WWB) and tr(MSE) versus total power.
    Bounds(Common),
    /// Per-sensor powers, objective and tr(D) for each allocation scheme.
    Allocate(Common),
    /// Monte-Carlo tr(MSE) against the analytical tr(D).
    Simulate(Common),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

fn run(cli: Cli) -> Result<(), AppError> {
    let (common, verb): (&Common, fn(&ExperimentConfig) -> Result<commands::Outcome, AppError>) = match &cli.command {
        Command::Fim(c) => (c, commands::fim),
        Command::Bounds(c) => (c, commands::bounds),
        Command::Allocate(c) => (c, commands::allocate_cmd),
        Command::Simulate(c) => (c, commands::simulate_cmd),
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(AppError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| AppError::Config(e.to_string()))?;
    }
    let cfg = ExperimentConfig::load(&common.config, common.seed)?;
    let out = verb(&cfg)?;
    out.table.write_atomic(&common.out, &cfg.hash())?;
    if out.failed {
        return Err(AppError::Solver(format!(
            "some rows failed, see the error column of {}",
            common.out.display()
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("distest: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
