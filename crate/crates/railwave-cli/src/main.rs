//! Vibration fault diagnosis pipeline: generate a labeled synthetic
//! dataset, turn each recording into a wavelet scalogram image, train a
//! small residual network on the images, and report per-class metrics.
//!
//! Every command is driven by one declarative config file (see
//! `config.rs` for the grammar) plus `--set` overrides, and is
//! deterministic given the config and seeds.

mod config;
mod pipeline;

use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use pipeline::{CliError, EvalArgs};
use railwave_core::signal::Split;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "railwave",
    version,
    about = "Vibration-signal fault diagnosis: synthetic data, scalogram features, residual-network training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its split manifest
    Generate(Common),
    /// Compute a scalogram feature image for every dataset segment
    Extract(Common),
    /// Train the classifier on extracted feature images
    Train(Common),
    /// Evaluate a checkpoint (or injected predictions) on one split
    Eval {
        #[command(flatten)]
        common: Common,
        /// Which split to evaluate: train, val, or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Checkpoint path; defaults to <output.dir>/checkpoint.rwck
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Skip the model: compute metrics from an index,label,pred CSV
        #[arg(long)]
        predictions_file: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Config file; defaults apply for every key it omits
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set training.lr=0.1 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Set dataset.seed, model.seed, and training.seed at once
    #[arg(long)]
    seed: Option<u64>,
    /// Print what the command would do without writing anything
    #[arg(long)]
    dry_run: bool,
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            RunConfig::parse(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    for binding in &common.overrides {
        let (key, value) = binding.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--set {binding:?}: expected KEY=VALUE"))
        })?;
        cfg.set(key.trim(), value.trim())
            .map_err(|e| CliError::Usage(format!("--set {binding:?}: {e}")))?;
    }
    if let Some(seed) = common.seed {
        cfg.override_seeds(seed);
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(common) => {
            let cfg = load_config(&common)?;
            pipeline::cmd_generate(&cfg, common.dry_run)
        }
        Command::Extract(common) => {
            let cfg = load_config(&common)?;
            pipeline::cmd_extract(&cfg, common.dry_run)
        }
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            pipeline::cmd_train(&cfg, common.dry_run)
        }
        Command::Eval {
            common,
            split,
            checkpoint,
            predictions_file,
        } => {
            let cfg = load_config(&common)?;
            let split: Split = split
                .parse()
                .map_err(|e| CliError::Usage(format!("--split: {e}")))?;
            let args = EvalArgs {
                split,
                checkpoint,
                predictions_file,
            };
            pipeline::cmd_eval(&cfg, &args, common.dry_run)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful outcomes; everything else is
            // a usage error (exit 1, unlike clap's default of 2, which this
            // tool reserves for runtime failures).
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
