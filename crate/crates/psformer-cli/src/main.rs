//! Command-line harness: train, evaluate, audit parameter counts, check
//! gradients, export attention maps, and run ablation sweeps.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::AblationAxis;
use config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Runtime(msg) => f.write_str(msg),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "psformer",
    about = "Parameter-shared segment-attention forecasting toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand; flags override config-file values,
/// which override the built-in benchmark defaults.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Flat key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV dataset (first column timestamp, remaining columns numeric)
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Split protocol: auto | ett-hourly | ett-minute | fractions
    #[arg(long)]
    split_mode: Option<String>,
    /// Look-back window length L
    #[arg(long)]
    lookback: Option<usize>,
    /// Forecast horizon F
    #[arg(long)]
    horizon: Option<usize>,
    /// Number of segments N (must divide L)
    #[arg(long)]
    segments: Option<usize>,
    /// Number of encoder layers
    #[arg(long)]
    encoders: Option<usize>,
    /// Sharing mode: in-encoder | cross-encoders | all | none
    #[arg(long)]
    sharing: Option<String>,
    /// Steps of the window used for normalization statistics (0 = full window)
    #[arg(long)]
    revin_window: Option<usize>,
    /// SAM neighborhood radius (0 disables SAM)
    #[arg(long)]
    rho: Option<f64>,
    /// Constant learning rate
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epoch cap
    #[arg(long)]
    epochs: Option<usize>,
    /// Early-stopping patience, in epochs
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(v) = &self.dataset {
            cfg.dataset = Some(v.clone());
        }
        if let Some(v) = &self.split_mode {
            cfg.set("split_mode", v)?;
        }
        if let Some(v) = self.lookback {
            cfg.lookback = v;
        }
        if let Some(v) = self.horizon {
            cfg.horizon = v;
        }
        if let Some(v) = self.segments {
            cfg.segments = v;
        }
        if let Some(v) = self.encoders {
            cfg.encoders = v;
        }
        if let Some(v) = &self.sharing {
            cfg.set("sharing", v)?;
        }
        if let Some(v) = self.revin_window {
            cfg.revin_window = v;
        }
        if let Some(v) = self.rho {
            cfg.rho = Some(v);
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write report, best checkpoint and resolved config
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on a split
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train | val | test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Print parameter counts for the configuration, across sharing modes
    CountParams {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Verify analytic gradients against central finite differences (f64)
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write attention score matrices of one sample as CSV files
    ExportAttention {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train | val | test
        #[arg(long, default_value = "test")]
        split: String,
        /// Window index within the split
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Also export this channel's PxP submatrix
        #[arg(long)]
        channel: Option<usize>,
        /// Also export the PxP submatrix relating two channels, e.g. "0,5"
        #[arg(long)]
        channel_pair: Option<String>,
    },
    /// Train/evaluate across one hyperparameter axis
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// segments | encoders | sharing | rho
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults to the benchmark sweep
        #[arg(long)]
        values: Option<String>,
    },
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { cfg } => commands::cmd_train(&cfg.resolve()?),
        Command::Eval { cfg, checkpoint, split } => {
            commands::cmd_eval(&cfg.resolve()?, &checkpoint, &split)
        }
        Command::CountParams { cfg } => commands::cmd_count_params(&cfg.resolve()?),
        Command::GradCheck { seed } => commands::cmd_grad_check(seed),
        Command::ExportAttention {
            cfg,
            checkpoint,
            split,
            sample,
            channel,
            channel_pair,
        } => {
            let pair = match channel_pair {
                None => None,
                Some(s) => {
                    let (a, b) = s.split_once(',').ok_or_else(|| {
                        CliError::Usage(format!("--channel-pair wants 'A,B', got '{s}'"))
                    })?;
                    Some((
                        a.trim()
                            .parse()
                            .map_err(|_| CliError::Usage(format!("bad channel '{a}'")))?,
                        b.trim()
                            .parse()
                            .map_err(|_| CliError::Usage(format!("bad channel '{b}'")))?,
                    ))
                }
            };
            commands::cmd_export_attention(
                &cfg.resolve()?,
                &checkpoint,
                &split,
                sample,
                channel,
                pair,
            )
        }
        Command::Ablate { cfg, axis, values } => {
            let axis = AblationAxis::parse(&axis)
                .ok_or_else(|| CliError::Usage(format!("unknown ablation axis '{axis}'")))?;
            let values =
                values.map(|v| v.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>());
            commands::cmd_ablate(&cfg.resolve()?, axis, values)
        }
    }
}

fn main() {
    match run() {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}
