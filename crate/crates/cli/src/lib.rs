//! Command implementations behind the `supportbench` binary.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success = 0,
    ValidationFailure = 1,
    PartialRun = 2,
    InternalError = 3,
}

impl From<Status> for ExitCode {
    fn from(s: Status) -> Self {
        ExitCode::from(s as u8)
    }
}

#[derive(Debug)]
pub struct CliError {
    pub status: Status,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn new(status: Status, error: anyhow::Error) -> Self {
        Self { status, error }
    }
}

pub type CliResult = Result<Status, CliError>;

pub trait ResultExt<T> {
    fn validation(self) -> Result<T, CliError>;
    fn internal(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for Result<T, E> {
    fn validation(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(Status::ValidationFailure, e.into()))
    }

    fn internal(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(Status::InternalError, e.into()))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "supportbench",
    version,
    about = "Support-seeking evaluation for text-to-SQL models"
)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check config paths, the catalog, every gold query and the backend.
    Validate {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Run the protocol over the dataset and write records, manifest and run report.
    Run {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Compute the summary and curve CSVs from a records file.
    Metrics {
        /// JSONL records written by `run`.
        records: PathBuf,
        /// Manifest of the run; defaults to manifest.json next to the records.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory; defaults to the records' directory.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        baseline_trials: u32,
    },
    /// Bundle manifest, run report, summary and curves into one directory.
    Report {
        /// Output directory of a run.
        run_dir: PathBuf,
        /// Bundle directory; defaults to `<run_dir>/report`.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        baseline_trials: u32,
    },
}

pub fn execute(cli: Cli) -> CliResult {
    match cli.command {
        Command::Validate { config } => commands::validate(&config),
        Command::Run { config } => commands::run(&config),
        Command::Metrics {
            records,
            manifest,
            out,
            baseline_trials,
        } => commands::metrics(
            &records,
            manifest.as_deref(),
            out.as_deref(),
            baseline_trials,
        ),
        Command::Report {
            run_dir,
            out,
            baseline_trials,
        } => commands::report(&run_dir, out.as_deref(), baseline_trials),
    }
}

pub fn main_with(cli: Cli) -> ExitCode {
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match execute(cli) {
        Ok(status) => status.into(),
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            e.status.into()
        }
    }
}
