//! `graphpose`: synthesize or ingest corpora, train, evaluate, run the
//! ablation grid and render reports.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage, config or data error.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use graphpose_core::data::SplitStrategy;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, config or input data.
    Usage(String),
    Internal(anyhow::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Internal(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) => f.write_str(m),
            Self::Internal(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<graphpose_core::experiment::ExperimentError> for CliError {
    fn from(e: graphpose_core::experiment::ExperimentError) -> Self {
        if e.is_usage() {
            Self::Usage(e.to_string())
        } else {
            Self::Internal(e.into())
        }
    }
}

impl From<graphpose_core::data::DataError> for CliError {
    fn from(e: graphpose_core::data::DataError) -> Self {
        graphpose_core::experiment::ExperimentError::from(e).into()
    }
}

impl From<graphpose_core::training::TrainError> for CliError {
    fn from(e: graphpose_core::training::TrainError) -> Self {
        graphpose_core::experiment::ExperimentError::from(e).into()
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "graphpose", version, about = "WiFi CSI to 3D pose: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus the overrides shared by training commands. Flags win
/// over `GPFI_SEED`, which wins over the file.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run config; defaults to the built-in preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in preset when no config file is given.
    #[arg(long, value_parser = ["full", "desk"], default_value = "full")]
    pub preset: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub split: Option<SplitStrategy>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long)]
        force: bool,
    },
    /// Convert a canonical corpus (or raw complex CSI with --raw) to a
    /// canonical corpus with millimeter poses.
    Ingest {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        force: bool,
    },
    /// Split, train and evaluate.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus root; overrides `data.root`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on the held-out side of a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the split recorded next to the checkpoint.
        #[arg(long)]
        split: Option<SplitStrategy>,
        /// Also write metrics.json, table1.csv and per_joint.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train the aggregator and head ablation grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Render plots and a text summary for a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference audit of the analytic gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        /// Fails with exit 1 above this relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth {
            cfg,
            out,
            n_samples,
            noise_sigma,
            force,
        } => commands::synth(&cfg, &out, n_samples, noise_sigma, force),
        Command::Ingest { src, out, raw, force } => commands::ingest(&src, &out, raw, force),
        Command::Train {
            cfg,
            data,
            out,
            force,
            quiet,
        } => commands::train(&cfg, data.as_deref(), &out, force, !quiet),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            force,
        } => commands::eval(&checkpoint, &data, split, out.as_deref(), force),
        Command::Ablate {
            cfg,
            data,
            out,
            parallel,
            force,
            quiet,
        } => commands::ablate(&cfg, data.as_deref(), &out, parallel, force, !quiet),
        Command::Report { run, force } => report::report(&run, force),
        Command::Gradcheck { seed, h, tolerance } => commands::gradcheck(seed, h, tolerance),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
