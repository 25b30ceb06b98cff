//! `dsmt` command-line driver: one TOML config drives data synthesis,
//! training, evaluation, prediction, ablation, gradient checking and the
//! self-ensemble search. Every command validates the whole config (and any
//! checkpoint and dataset it needs) before it writes anything.

pub mod commands;
pub mod config;
pub mod error;
mod run;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::{code, CliError};

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "DSMT_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "dsmt", version, about = "Deeply supervised multitask autoencoder experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory. Defaults to `<eval.out_dir>/<config hash>-<timestamp>`
    /// (`data.dir` for synth).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,

    /// Force deterministic training.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Checkpoint to evaluate, predict with, search, or resume training from.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,

    /// Test hook for gradcheck: scales analytic gradients.
    #[arg(long, global = true, hide = true)]
    pub corrupt_factor: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset (volumes, manifest, label table).
    Synth,
    /// Train one model; writes best and final checkpoints and a JSONL log.
    Train,
    /// Evaluate a checkpoint on the validation split.
    Eval,
    /// Predict every sample of the dataset with a checkpoint.
    Predict,
    /// Train and evaluate all five variants under one protocol.
    Ablate,
    /// Finite-difference gradient check on a tiny model.
    Gradcheck,
    /// Fit self-ensemble weights for a checkpoint.
    EnsembleSearch,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Predict => "predict",
            Command::Ablate => "ablate",
            Command::Gradcheck => "gradcheck",
            Command::EnsembleSearch => "ensemble-search",
        }
    }

    fn needs_checkpoint(self) -> bool {
        matches!(self, Command::Eval | Command::Predict | Command::EnsembleSearch)
    }
}

/// Sizes the global thread pool from [`WORKERS_ENV`]. A pool that already
/// exists (several runs in one process) is kept.
pub fn init_workers() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else { return Ok(()) };
    let n: usize = raw.trim().parse().map_err(|_| CliError::config(format!("{WORKERS_ENV} must be a positive integer, got {raw:?}")))?;
    if n == 0 {
        return Err(CliError::config(format!("{WORKERS_ENV} must be at least 1")));
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Loads, overrides and validates the config for `cli`.
pub fn prepare_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = cfg.resolve(cli.seed, cli.deterministic);
    cfg.validate()?;
    if cli.command.needs_checkpoint() && cli.checkpoint.is_none() {
        return Err(CliError::config(format!("{} needs --checkpoint", cli.command.name())));
    }
    if let Some(p) = &cli.checkpoint {
        if !p.is_file() {
            return Err(CliError::config(format!("checkpoint {} does not exist", p.display())));
        }
    }
    if let Some(f) = cli.corrupt_factor {
        if !f.is_finite() {
            return Err(CliError::config("corrupt factor must be finite"));
        }
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    init_workers()?;
    let cfg = prepare_config(cli)?;
    match cli.command {
        Command::Synth => commands::synth(cli, &cfg),
        Command::Train => commands::train(cli, &cfg),
        Command::Eval => commands::eval(cli, &cfg),
        Command::Predict => commands::predict(cli, &cfg),
        Command::Ablate => commands::ablate(cli, &cfg),
        Command::Gradcheck => commands::gradcheck(cli, &cfg),
        Command::EnsembleSearch => commands::ensemble_search(cli, &cfg),
    }
}
