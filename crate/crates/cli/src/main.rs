mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Unreadable or malformed input.
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numerical(String),
    /// A replay produced outputs that differ from the manifest.
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Io(_) | CliError::Numerical(_) => 1,
        }
    }
}

impl From<trackalloc::Error> for CliError {
    fn from(e: trackalloc::Error) -> Self {
        match e {
            trackalloc::Error::Infeasible { .. } => CliError::Infeasible(e.to_string()),
            trackalloc::Error::InvalidParameter(_) => CliError::Config(e.to_string()),
            trackalloc::Error::Singular { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "trackalloc", version, about = "Measurement allocation experiments for multi-target tracking")]
struct Cli {
    /// Worker threads for replicate fan-out (all cores when absent).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the scenario's master seed.
    #[arg(long, global = true, env = "TRACKALLOC_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment JSON file.
    config: PathBuf,
    /// Output directory, created when missing.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the scenario for every replicate seed and log per-slot metrics.
    Simulate(RunArgs),
    /// Run the online swarm search and log every particle's policy.
    Optimize(RunArgs),
    /// Fixed point and critical probability of the modified Riccati equation.
    Mare(commands::MareArgs),
    /// Compile a probability vector into an attempt matrix.
    Schedule(commands::ScheduleArgs),
    /// Accumulated trace of front-loaded, back-loaded and even patterns.
    ComparePatterns(RunArgs),
    /// Mean error against the channel success probability.
    SweepLambda(RunArgs),
    /// Re-run the command recorded in a manifest and check its outputs.
    Replay {
        manifest: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    let ctx = commands::Context {
        threads: cli.threads,
        seed: cli.seed,
    };
    match cli.command {
        Command::Simulate(a) => commands::experiment(&ctx, "simulate", &a.config, &a.out),
        Command::Optimize(a) => commands::experiment(&ctx, "optimize", &a.config, &a.out),
        Command::ComparePatterns(a) => commands::experiment(&ctx, "compare-patterns", &a.config, &a.out),
        Command::SweepLambda(a) => commands::experiment(&ctx, "sweep-lambda", &a.config, &a.out),
        Command::Mare(a) => commands::mare(&a),
        Command::Schedule(a) => commands::schedule(&a),
        Command::Replay { manifest, out } => commands::replay(&ctx, &manifest, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
