use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

mod commands;
mod config;
mod error;

use commands::Context;
use config::RunConfig;
use error::CliError;

/// Infer ODE parameters by matching stationary densities under optimal transport.
#[derive(Parser)]
#[command(name = "measinv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `io.output_dir`.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Integrate a trajectory and write it as CSV.
    Simulate,
    /// Bin a trajectory into a density file.
    Hist,
    /// Solve for the stationary density of the forward model.
    Steady,
    /// Transport cost and potentials between two density files.
    Dist,
    /// Recover parameters by gradient or coordinate descent.
    Infer,
    /// Compare analytic and finite-difference gradients.
    Gradcheck,
}

fn threads(cfg: &RunConfig) -> Result<usize, CliError> {
    match std::env::var("MEASINV_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("MEASINV_THREADS={v:?} is not a thread count"))),
        Err(_) => Ok(cfg.threads),
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <PATH> is required".into()))?;
    let cfg = RunConfig::load(path)?;
    let n = threads(&cfg)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let ctx = Context::new(cfg, cli.out.clone())?;
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Hist => commands::hist(&ctx),
        Command::Steady => commands::steady(&ctx),
        Command::Dist => commands::dist(&ctx),
        Command::Infer => commands::infer(&ctx),
        Command::Gradcheck => commands::gradcheck(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
