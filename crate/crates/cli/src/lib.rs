//! The `active-testing` command line: synthetic data, simulation grids,
//! ranking experiments and the live vetting service.

pub mod commands;
pub mod manifest;
mod output;

use std::fmt::Display;
use std::path::PathBuf;

use active_testing::engine::EngineError;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use output::{prepare_out_dir, write_atomic};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: manifests, datasets, flags. Exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while running. Exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn validation(e: impl Display) -> Self {
        CliError::Validation(e.to_string())
    }

    pub fn runtime(e: impl Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::InvalidConfig { .. }
            | EngineError::SystemMismatch(_)
            | EngineError::Dataset(_) => CliError::validation(e),
            other => CliError::runtime(other),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "active-testing",
    version,
    about = "Metric estimation on partially vetted test sets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic tag or instance dataset.
    Gen(GenArgs),
    /// Run every (estimator, strategy) cell of a grid many times and
    /// write per-step error curves.
    Simulate(ExperimentArgs),
    /// Measure how often partial vetting ranks two systems wrongly.
    Rank(ExperimentArgs),
    /// Serve live vetting sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// A tag file, or a directory for instance data and multi-system tags.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the manifest.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory; overrides the manifest's.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads. Defaults to the number of cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Master seed; overrides the manifest's.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// A dataset, or a directory of datasets.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Where session event logs live.
    #[arg(long, default_value = "sessions")]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(args) => {
            let report = commands::gen(&args)?;
            print!("{report}");
        }
        Command::Simulate(args) => {
            for path in commands::simulate(&args)? {
                println!("{}", path.display());
            }
        }
        Command::Rank(args) => {
            for path in commands::rank(&args)? {
                println!("{}", path.display());
            }
        }
        Command::Serve(args) => commands::serve(&args)?,
    }
    Ok(())
}
