//! `auxvae`: generate datasets, train and evaluate Aux-VAE models, run the experiments.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error, 3 I/O error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use auxvae::datagen::DatagenError;
use auxvae::experiments::ExperimentError;
use auxvae::objective::ObjectiveError;
use auxvae::trainer::TrainError;

use commands::{Common, UsageError};

#[derive(Parser, Debug)]
#[command(name = "auxvae", version, about = "Aux-VAE disentanglement lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML configuration for the subcommand
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the seed in the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for outputs and the run manifest
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Worker threads for dataset generation and grid search
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Run everything on one thread so outputs are bit-reproducible
    #[arg(long, global = true)]
    threads_deterministic: bool,

    /// Print the default configuration for the subcommand and exit
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Render a synthetic dataset
    Generate,
    /// Train a model
    Train,
    /// Grid-search (beta, lambda1, lambda2) on the validation split
    Gridsearch,
    /// Compute LDS, SAP, MSE and SSIM for a checkpoint
    Evaluate,
    /// Decode latent traversal strips
    Traverse,
    /// Perturb the auxiliary or residual latent block
    Perturb,
    /// FGSM robustness curve
    Attack,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Gridsearch => "gridsearch",
            Command::Evaluate => "evaluate",
            Command::Traverse => "traverse",
            Command::Perturb => "perturb",
            Command::Attack => "attack",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Failure {
    Numerical = 1,
    Usage = 2,
    Io = 3,
}

fn classify(err: &anyhow::Error) -> Failure {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return Failure::Usage;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return Failure::Io;
        }
        if let Some(e) = cause.downcast_ref::<DatagenError>() {
            return data_failure(e);
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::NonFinite { .. } | TrainError::Objective(ObjectiveError::NonFinite(..)) => Failure::Numerical,
                TrainError::Io(_) | TrainError::Format(_) => Failure::Io,
                TrainError::Data(d) => data_failure(d),
                _ => Failure::Usage,
            };
        }
        if let Some(e) = cause.downcast_ref::<ExperimentError>() {
            return match e {
                ExperimentError::NonFiniteGradient | ExperimentError::Objective(ObjectiveError::NonFinite(..)) => {
                    Failure::Numerical
                }
                ExperimentError::Data(d) => data_failure(d),
                _ => Failure::Usage,
            };
        }
    }
    Failure::Usage
}

fn data_failure(e: &DatagenError) -> Failure {
    match e {
        DatagenError::Io(_) | DatagenError::Format(_) => Failure::Io,
        _ => Failure::Usage,
    }
}

fn run(cli: &Cli) -> Result<()> {
    if cli.print_config {
        print!("{}", commands::default_config(cli.command.name()));
        return Ok(());
    }
    let Some(config) = cli.config.clone() else {
        return Err(UsageError(format!("`{}` needs --config PATH", cli.command.name())).into());
    };
    let threads = if cli.threads_deterministic { Some(1) } else { cli.workers };
    if let Some(n) = threads {
        if n == 0 {
            return Err(UsageError("--workers must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    std::fs::create_dir_all(&cli.out)?;
    let common = Common { config, seed: cli.seed, out: cli.out.clone() };
    match cli.command {
        Command::Generate => commands::generate(&common),
        Command::Train => commands::train(&common),
        Command::Gridsearch => commands::gridsearch(&common),
        Command::Evaluate => commands::evaluate_cmd(&common),
        Command::Traverse => commands::traverse_cmd(&common),
        Command::Perturb => commands::perturb_cmd(&common),
        Command::Attack => commands::attack_cmd(&common),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err) as u8)
        }
    }
}
