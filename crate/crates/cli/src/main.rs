// SPDX-License-Identifier: Apache-2.0

//! `contood`: run continual OOD experiments and the oracle checks.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! training error, 3 oracle check failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] contood::Error),
    #[error("{0}")]
    Oracle(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Oracle(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "contood",
    version,
    about = "Continual OOD detection with searched thresholds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML file with run settings; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunConfig,
}

impl ConfigArgs {
    fn resolve(self) -> Result<RunConfig, CliError> {
        let cfg = RunConfig::load(self.config.as_deref(), self.run)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the continual protocol for every seed and write stage reports
    Run(ConfigArgs),
    /// Estimate the initial eta by leave-one-class-out search
    Loocv(ConfigArgs),
    /// Re-score a checkpoint on the test split
    Eval(commands::EvalArgs),
    /// Compare the threshold search with a dense-grid oracle
    Searchcheck(commands::SearchCheckArgs),
    /// Compare analytic gradients with finite differences
    Gradcheck(commands::GradCheckArgs),
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => commands::run(&args.resolve()?),
        Command::Loocv(args) => commands::loocv(&args.resolve()?),
        Command::Eval(args) => commands::eval(args),
        Command::Searchcheck(args) => commands::searchcheck(&args),
        Command::Gradcheck(args) => commands::gradcheck(&args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
