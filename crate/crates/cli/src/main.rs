//! `ts-count`: run bandit simulations, generate and replay MRT logs, and fit
//! count regressions from the command line.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{FileConfig, FitOpts, GenMrtOpts, MrtSimOpts, ReplayOpts, SimulateOpts};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config or inputs; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while running; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ts-count", version, about = "Thompson sampling for count outcomes")]
struct Cli {
    /// TOML file with one table per command; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic bandit experiment from a preset.
    Simulate(SimulateOpts),
    /// Per-user MRT simulation with clipped regret.
    MrtSim(MrtSimOpts),
    /// Write a synthetic MRT log under 0.6 randomization.
    GenMrt(GenMrtOpts),
    /// Replay an MRT log and estimate reward improvements with SNIPW.
    Replay(ReplayOpts),
    /// Fit a count regression.
    Fit(FitOpts),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Simulate(o) => commands::simulate(o.merge(file.simulate)),
        Command::MrtSim(o) => commands::mrt_sim(o.merge(file.mrt_sim)),
        Command::GenMrt(o) => commands::gen_mrt(o.merge(file.gen_mrt)),
        Command::Replay(o) => commands::replay(o.merge(file.replay)),
        Command::Fit(o) => commands::fit(o.merge(file.fit)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
