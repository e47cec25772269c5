//! `gcdm`: train, sample, evaluate and inspect molecule diffusion models.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
//! `GCDM_THREADS` sets the worker thread count.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;

/// Marks errors that come from the invocation or configuration rather than
/// from the work itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const THREADS_ENV: &str = "GCDM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "gcdm", version, about = "Geometry-complete diffusion for 3D molecule generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy)]
enum CommandKind {
    Train,
    Sample,
    Eval,
    Inspect,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Seed for initialization, noise and sampling; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Set a configuration value, e.g. `optimizer.learning_rate=1e-3`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoints and a loss log.
    Train(RunArgs),
    /// Sample molecules from a checkpoint.
    Sample(RunArgs),
    /// Sample (or read) molecules and write a metrics report.
    Eval(RunArgs),
    /// Print the dataset size distribution and the schedule's SNR curve.
    Inspect(RunArgs),
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| anyhow::anyhow!("cannot configure thread pool: {e}"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    let (kind, args) = match cli.command {
        Command::Train(a) => (CommandKind::Train, a),
        Command::Sample(a) => (CommandKind::Sample, a),
        Command::Eval(a) => (CommandKind::Eval, a),
        Command::Inspect(a) => (CommandKind::Inspect, a),
    };
    let config = RunConfig::load(&args.config, &args.overrides, args.seed)?;
    match kind {
        CommandKind::Train => commands::train(&config, args.out.as_deref()),
        CommandKind::Sample => commands::sample(&config, args.out.as_deref()),
        CommandKind::Eval => commands::eval(&config, args.out.as_deref()),
        CommandKind::Inspect => commands::inspect(&config, &mut std::io::stdout().lock()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
