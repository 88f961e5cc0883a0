mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lscnn_core::data::Split;
use lscnn_core::Error;

use crate::config::{Overrides, RunConfig};

/// Locally specialized CNN pipeline for face anti-spoofing.
#[derive(Debug, Parser)]
#[command(name = "lscnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for data generation and training, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for independent training runs.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Replace existing outputs of this stage.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic dataset as a PNG tree with a manifest.
    GenSynth(Common),
    /// Train the nine PatchNets p1..p9.
    TrainPatchnets(Common),
    /// Compose the PatchNets into one network.
    Compose(Common),
    /// Fine-tune the composed network on whole faces.
    Finetune(Common),
    /// Train the whole network from random initialization.
    TrainBaseline(Common),
    /// Score a split and write the evaluation report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to the best fine-tuned one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Decision threshold for HTER, usually a validation EER threshold.
        #[arg(long, allow_negative_numbers = true)]
        threshold: Option<f64>,
    },
}

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidParameter(_) => 2,
            Error::Data(_)
            | Error::Io { .. }
            | Error::InvalidInput(_)
            | Error::UndefinedMetric(_)
            | Error::Undecidable(_) => 3,
            Error::Divergence(_) => 4,
            Error::Format { .. } => 5,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, command) = match &cli.command {
        Command::GenSynth(c)
        | Command::TrainPatchnets(c)
        | Command::Compose(c)
        | Command::Finetune(c)
        | Command::TrainBaseline(c) => (c, &cli.command),
        Command::Eval { common, .. } => (common, &cli.command),
    };
    if common.threads == 0 {
        return Err(CliError::usage("--threads must be >= 1"));
    }
    let doc = match &common.config {
        Some(path) => RunConfig::read(path)?,
        None => RunConfig::default(),
    };
    let flags = Overrides {
        out: common.out.clone(),
        seed: common.seed,
    };
    let resolved = doc.resolve(common.config.as_deref(), &flags)?;
    let ctx = commands::Context {
        run: resolved,
        threads: common.threads,
        force: common.force,
    };
    match command {
        Command::GenSynth(_) => commands::gen_synth(&ctx),
        Command::TrainPatchnets(_) => commands::train_patchnets(&ctx),
        Command::Compose(_) => commands::compose(&ctx),
        Command::Finetune(_) => commands::finetune(&ctx),
        Command::TrainBaseline(_) => commands::train_baseline(&ctx),
        Command::Eval {
            checkpoint,
            split,
            threshold,
            ..
        } => commands::eval(&ctx, checkpoint.as_deref(), *split, *threshold),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LSCNN_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
