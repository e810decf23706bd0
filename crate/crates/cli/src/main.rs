//! `cq`: phantom generation, training, cross-validation, quantification,
//! reporting and gradient checks.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use cq_core::train::Strategy;

use config::{Overrides, RunConfig, SEED_ENV};
use error::CliError;

#[derive(Parser)]
#[command(name = "cq", version, about = "Left-ventricle quantification from cine MR sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom(Common),
    /// Train G and D on a dataset and write a checkpoint.
    Train(Common),
    /// k-fold cross-validation with per-fold and pooled reports.
    Eval(Common),
    /// Measure indices geometrically on G's masks (or the stored masks).
    Quantify(Common),
    /// Evaluate a checkpoint on a dataset.
    Report(Common),
    /// Finite-difference check of every gradient.
    Gradcheck(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Multistage,
    End2end,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides CQ_SEED and the config file.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Cross-validation folds.
    #[arg(long, value_name = "K")]
    folds: Option<usize>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dataset directory (manifest plus subject directories).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let o = Overrides {
            seed: self.seed,
            strategy: self.strategy.map(|s| match s {
                StrategyArg::Multistage => Strategy::Multistage,
                StrategyArg::End2end => Strategy::End2end,
            }),
            folds: self.folds,
            out: self.out.clone(),
            dataset: self.data.clone(),
            checkpoint: self.checkpoint.clone(),
        };
        base.resolve(o, std::env::var(SEED_ENV).ok())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, f): (&Common, fn(&RunConfig, bool) -> Result<(), CliError>) = match &cli.command {
        Command::Phantom(c) => (c, commands::phantom),
        Command::Train(c) => (c, commands::train_cmd),
        Command::Eval(c) => (c, commands::eval),
        Command::Quantify(c) => (c, commands::quantify),
        Command::Report(c) => (c, commands::report),
        Command::Gradcheck(c) => (c, commands::gradcheck),
    };
    let cfg = common.resolve()?;
    f(&cfg, common.force)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::new("E_USAGE", first).line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
