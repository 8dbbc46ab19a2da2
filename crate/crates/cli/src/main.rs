mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use korteweg::Error;

/// Periodic fourth-order gradient flows: runs, sweeps, refinement studies
/// and the identity lab.
#[derive(Debug, Parser)]
#[command(name = "korteweg", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Configuration file (ini-style `key = value`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding the configured one.
    #[arg(long, global = true)]
    pub outdir: Option<PathBuf>,
    /// Concurrent sweep legs.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Spatial derivative backend, overriding the configured one.
    #[arg(long, global = true, value_name = "spectral|fd4")]
    pub backend: Option<String>,
    /// Only warnings and errors on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate one configuration.
    Run,
    /// Check the identities and inequalities over a list of exponents.
    Verify {
        /// Comma-separated exponents (default: the lab grid).
        #[arg(long, allow_hyphen_values = true)]
        beta: Option<String>,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
    },
    /// Refinement study over the `[convergence]` ladder.
    Convergence,
    /// Runs over the `[sweep]` axes.
    Sweep,
}

/// Exit codes shared by every subcommand.
pub mod exit {
    pub const OK: u8 = 0;
    pub const FAILED: u8 = 1;
    pub const VACUUM: u8 = 2;
    pub const DT_UNDERFLOW: u8 = 3;
    pub const CONFIG: u8 = 64;
    pub const USER_ABORT: u8 = 130;
}

pub fn error_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ExcludedBeta { .. } => exit::CONFIG,
        Error::Vacuum { .. } => exit::VACUUM,
        _ => exit::FAILED,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let code = match commands::dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("korteweg: {e}");
            error_code(&e)
        }
    };
    ExitCode::from(code)
}
