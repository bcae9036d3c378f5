//! Command-line front end.
//!
//! Exit codes are a stable contract for scripting:
//! 0 = success, 1 = verification or training failure, 2 = configuration or
//! input error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grcl_core::error::Error;

#[derive(Parser)]
#[command(
    name = "grcl",
    about = "Gated recurrent convolutional network toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// JSON config file with flat dotted keys (e.g. {"trainer.lr": 0.05})
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; fully determines every stochastic choice
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; receives resolved-config.json and all artifacts
    #[arg(long)]
    out: PathBuf,
    /// Architecture preset
    #[arg(long, value_parser = ["tiny", "paper"])]
    preset: Option<String>,
    /// Override any config key, repeatable (e.g. --set trainer.lr=0.1)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Directory-per-class PNG folder for training
    #[arg(long)]
    train_dir: Option<PathBuf>,
    /// Directory-per-class PNG folder for evaluation
    #[arg(long)]
    test_dir: Option<PathBuf>,
    /// Superclass map file (one `class<TAB>superclass` line each, -1 unmapped)
    #[arg(long)]
    superclass_map: Option<PathBuf>,
    /// Reference distribution file (rows of 11 tab-separated columns)
    #[arg(long)]
    superclass_ref: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from scratch (synthetic corpus by default)
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Enable CutMix label/patch mixing
        #[arg(long)]
        cutmix: bool,
        /// Enable AugMix views with the Jensen-Shannon consistency loss
        #[arg(long)]
        augmix: bool,
    },
    /// Fine-tune one recurrent block from a checkpoint with overlay blending
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Stage: v1 (textures + noise, block 1) or v2 (textures, block 2)
        #[arg(long, value_parser = ["v1", "v2"])]
        stage: String,
        /// Base checkpoint to start from
        #[arg(long)]
        checkpoint: PathBuf,
        /// Texture overlay pool (PNG directory)
        #[arg(long)]
        textures: Option<PathBuf>,
        /// Noise overlay pool (PNG directory); required for stage v1
        #[arg(long)]
        noise: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Generate phase-randomized noise counterparts for a texture directory
    GenNoise {
        #[command(flatten)]
        common: CommonArgs,
        /// Input texture directory
        #[arg(long)]
        textures: PathBuf,
    },
    /// Evaluate a checkpoint
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Receptive-field support probe
    RfProbe {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated recursion depths to probe
        #[arg(long, default_value = "0,1,2,3")]
        t_values: String,
        /// Square input side length
        #[arg(long, default_value_t = 33)]
        input_size: usize,
        /// Square kernel side length
        #[arg(long, default_value_t = 3)]
        kernel: usize,
    },
    /// Finite-difference verification suites
    GradCheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Scope: kernel, grcl, or network
        #[arg(long, value_parser = ["kernel", "grcl", "network"])]
        scope: String,
        /// Number of random seeds
        #[arg(long)]
        seeds: Option<u64>,
        /// Test fixture: corrupt one backward result to prove detection
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

/// Failure with the exit code it maps to.
pub(crate) struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn verification(message: impl Into<String>) -> Failure {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        let code = match &e {
            Error::Divergence { .. } => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            common,
            data,
            epochs,
            batch_size,
            lr,
            cutmix,
            augmix,
        } => commands::cmd_train(common, data, epochs, batch_size, lr, cutmix, augmix),
        Command::Finetune {
            common,
            data,
            stage,
            checkpoint,
            textures,
            noise,
            epochs,
            lr,
        } => commands::cmd_finetune(common, data, stage, checkpoint, textures, noise, epochs, lr),
        Command::GenNoise { common, textures } => commands::cmd_gen_noise(common, textures),
        Command::Eval {
            common,
            data,
            checkpoint,
        } => commands::cmd_eval(common, data, checkpoint),
        Command::RfProbe {
            common,
            t_values,
            input_size,
            kernel,
        } => commands::cmd_rf_probe(common, t_values, input_size, kernel),
        Command::GradCheck {
            common,
            scope,
            seeds,
            corrupt,
        } => commands::cmd_grad_check(common, scope, seeds, corrupt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
