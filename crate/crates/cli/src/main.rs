use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ncvsd::commands::{self, Invocation, Status};
use ncvsd::config::RunConfig;

/// Exit code for failed checks and runtime errors.
const EXIT_FAILURE: u8 = 1;
/// Exit code for bad arguments or configuration.
const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "ncvsd",
    version,
    about = "Noise-conditional score distillation on Gaussian-mixture toys"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; must not exist yet.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Checkpoint to resume from or sample with.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// train: optimizer steps to run now; sample: sampling steps (1, 2, 4);
    /// pnp: annealing levels.
    #[arg(long, global = true)]
    steps: Option<u64>,
    /// sample: number of samples; pnp: number of chains.
    #[arg(long, global = true)]
    n: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the unconditioned denoiser every model starts from.
    Pretrain,
    /// Train the generator, or resume from --checkpoint.
    Train,
    /// Draw samples from the exact prior or a trained generator.
    Sample,
    /// Solve an inverse problem with plug-and-play sampling.
    Pnp,
    /// Run a verification suite; exits 1 if any check fails.
    Verify {
        #[arg(value_parser = ["prop1", "prop2", "gradient", "all"], default_value = "all")]
        suite: String,
    },
}

fn invocation(cli: &Cli) -> Result<Invocation> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    config.validate().context("invalid configuration")?;
    Ok(Invocation {
        config,
        config_path: cli.config.clone(),
        out: cli.out.clone(),
        threads: cli.threads.unwrap_or_else(rayon::current_num_threads),
        checkpoint: cli.checkpoint.clone(),
        steps: cli.steps,
        n: cli.n,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
        {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let inv = match invocation(&cli) {
        Ok(inv) => inv,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let result = match &cli.command {
        Command::Pretrain => commands::pretrain(&inv),
        Command::Train => commands::train(&inv),
        Command::Sample => commands::sample(&inv),
        Command::Pnp => commands::pnp(&inv),
        Command::Verify { suite } => commands::verify(&inv, suite),
    };
    match result {
        Ok(Status::Passed) => ExitCode::SUCCESS,
        Ok(Status::Failed) => ExitCode::from(EXIT_FAILURE),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
