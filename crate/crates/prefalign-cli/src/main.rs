//! `prefalign`: reproducible preference-alignment experiments on tabular policies.
//!
//! Every subcommand reads one JSON config and writes into the output
//! directory, finishing with `manifest_<subcommand>.json` that records the
//! config hash, the seed and the sha256 of every file read and written.

mod artifacts;
mod commands;
mod config;
mod corrupt;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Loaded;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "prefalign", version, about = "Preference-alignment lab for tabular softmax policies")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `out` field, then `./out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent sweep points.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Write reward, reference, base reference and dataset.
    Generate,
    /// Solve the constrained RLHF fixed point.
    Solve,
    /// Train one policy per configured loss.
    Train,
    /// Assumption, threshold and curvature diagnostics.
    Diagnose,
    /// Hinge-limit gap sweep over β.
    Limits,
    /// Loss-to-delta bridge certificate.
    Bridge,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Solve => "solve",
            Command::Train => "train",
            Command::Diagnose => "diagnose",
            Command::Limits => "limits",
            Command::Bridge => "bridge",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.jobs == 0 {
        return Err(CliError::validation("--jobs must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .map_err(|e| CliError::validation(format!("--jobs: {e}")))?;
    let path = cli.config.ok_or_else(|| CliError::validation("--config is required"))?;
    let loaded = Loaded::load(&path, cli.seed)?;
    let out = cli
        .out
        .or_else(|| loaded.config.out.as_ref().map(|p| loaded.resolve(p)))
        .unwrap_or_else(|| PathBuf::from("out"));
    commands::run(cli.command.name(), &loaded, &out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("prefalign {name}: {e}");
            e.exit_code()
        }
    }
}
