//! The `mswt` pipeline: data generation, training, rollout and evaluation.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mswt_core::config::RunConfig;
use mswt_core::spectral::SpectrumKind;
use mswt_core::{Error, Result};

mod commands;

pub use commands::{read_split, run, CHECKPOINT_FILE, LOSS_FILE};

#[derive(Debug, Parser)]
#[command(
    name = "mswt",
    version,
    about = "Multi-scale wavelet transformer surrogate pipeline"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration (desk, reference, smoke) when no file is given.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

impl GlobalArgs {
    pub fn run_config(&self) -> Result<RunConfig> {
        let cfg = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) => RunConfig::default(),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate training and test trajectories.
    GenerateData {
        /// Output directory (defaults to `paths.data_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the surrogate on generated data.
    Train {
        /// Data directory written by `generate-data` (defaults to `paths.data_dir`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory for the checkpoint and loss log (defaults to `paths.run_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total iterations.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Autoregressive rollout of a trained checkpoint.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Initial state: a single field or a trajectory whose first state is used.
        #[arg(long)]
        initial: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-step error metrics of a prediction against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Comma-separated rollout steps.
        #[arg(long, value_delimiter = ',', default_value = "1,30,64")]
        steps: Vec<usize>,
        /// Metrics CSV.
        #[arg(long)]
        out: PathBuf,
        /// Also write the compared spectra into this directory.
        #[arg(long)]
        spectra_dir: Option<PathBuf>,
    },
    /// Radially binned spectrum of one trajectory snapshot.
    Spectrum {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long, default_value_t = 0)]
        step: usize,
        #[arg(long, default_value = "enstrophy", value_parser = parse_kind)]
        kind: SpectrumKind,
        /// Channel holding the vorticity.
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// Bin every shell up to the grid corner instead of `min(H,W)/2 - 1`.
        #[arg(long)]
        all_shells: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time-mean bias of model trajectories against a reference.
    Climatology {
        /// Model trajectory; repeat for an ensemble.
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        reference: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_kind(s: &str) -> std::result::Result<SpectrumKind, String> {
    s.replace('-', "_")
        .parse()
        .map_err(|e: Error| e.to_string())
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::InvalidArgument(_) | Error::TapeConsumed => 2,
        Error::NonFinite(_) | Error::Unstable { .. } => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
    }
}
