use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use sgflow::{commands, CliError, ExperimentConfig, Invocation};

#[derive(Parser)]
#[command(
    name = "sgflow",
    version,
    about = "Semigeostrophic flows by semidiscrete optimal transport"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Evolve the initial measure and report the flow and its invariants.
    Run,
    /// Sweep a family of initial measures and tabulate flow gaps.
    Stability,
    /// Compare rotating patches with the exact solution.
    VortexValidate,
    /// Build a dominating N-function for a family of densities.
    OrliczDemo,
    /// Shallow-water variant with a height field.
    ShallowRun,
    /// Write the potential and its Legendre data at the final time.
    DumpPotential,
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Invalid(format!("--threads: {e}")))?;
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Invalid("--config is required".into()))?;
    let cfg = ExperimentConfig::load(path)?;
    let inv = Invocation::new(cfg, cli.out.clone(), cli.seed)?;
    match cli.command {
        Command::Run => commands::run(&inv),
        Command::Stability => commands::stability(&inv),
        Command::VortexValidate => commands::vortex_validate(&inv),
        Command::OrliczDemo => commands::orlicz_demo(&inv),
        Command::ShallowRun => commands::shallow_run(&inv),
        Command::DumpPotential => commands::dump_potential(&inv),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
