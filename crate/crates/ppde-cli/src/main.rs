use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use ppde::cli_harness::{run, ExperimentConfig, Status, Subcommand};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Check,
    Density,
    Solve,
    Simulate,
    Validate,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Self {
        match c {
            Command::Check => Subcommand::Check,
            Command::Density => Subcommand::Density,
            Command::Solve => Subcommand::Solve,
            Command::Simulate => Subcommand::Simulate,
            Command::Validate => Subcommand::Validate,
        }
    }
}

/// Parametrix densities, path-dependent PDE solutions and their Monte Carlo
/// cross-checks.
#[derive(Debug, Parser)]
#[command(name = "ppde", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the series truncation tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Worker threads for the numerical kernels.
    #[arg(long, env = "PPDE_THREADS")]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }
    let mut config = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(Status::ConfigError.code() as u8);
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(tol) = args.tol {
        config.parametrix.tolerance = tol;
    }
    let out = args.out.unwrap_or_else(|| config.out.clone());
    match run(args.command.into(), &config, &out) {
        Ok(outcome) => {
            for line in &outcome.report {
                println!("{line}");
            }
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            for a in &outcome.artifacts {
                println!("wrote {}", a.display());
            }
            ExitCode::from(outcome.status.code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(Status::from_error(&e).code() as u8)
        }
    }
}
