//! `ppmseg` — train, cross-validate, evaluate, and run a CPU
//! encoder-decoder lesion segmenter with pyramid-pooling skip connections.

mod commands;
mod config;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use ppmseg_core::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

use commands::Overrides;

#[derive(Parser)]
#[command(
    name = "ppmseg",
    version,
    about = "Skin-lesion segmentation: encoder-decoder CNN with pyramid pooling, on the CPU"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on an 80/20 split of a dataset and keep the best checkpoint
    Train {
        /// JSON run configuration
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// Override the configured dataset directory
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Override the configured output directory
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Override the configured seed
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
    },
    /// Run five-fold cross-validation and write folds.csv
    Crossval {
        /// JSON run configuration
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// Override the configured dataset directory
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Override the configured output directory
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Override the configured seed
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
    },
    /// Write a predicted mask PNG for every image in a directory
    Predict {
        /// Trained checkpoint
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Directory of input images
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Directory that receives <id>_mask.png files
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Score a checkpoint against a dataset with reference masks
    Eval {
        /// Trained checkpoint
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset directory (images + reference masks)
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Directory for metrics.json (printed to stdout when omitted)
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Verify every backward pass against central differences
    Gradcheck {
        /// Seed for the probe tensors
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
        /// Include a deliberately broken layer to exercise the failure path
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Generate a synthetic dataset of ellipse lesions
    MakeToy {
        /// Directory that receives the image/mask pairs
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of pairs to generate
        #[arg(long, value_name = "N", default_value_t = 25)]
        count: usize,
        /// Generator seed
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
    },
}

/// Exit codes: 0 success, 1 usage/config, 2 data, 3 checkpoint format,
/// 4 verification failure.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Shape(_) | Error::Contract(_) | Error::Config(_) => 1,
        Error::Ingestion(_) | Error::Io(_) => 2,
        Error::Format(_) => 3,
        Error::Training(_) => 4,
    }
}

fn run(cli: Cli) -> ppmseg_core::error::Result<u8> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            seed,
        } => commands::cmd_train(&config, &Overrides { data, out, seed }),
        Command::Crossval {
            config,
            data,
            out,
            seed,
        } => commands::cmd_crossval(&config, &Overrides { data, out, seed }),
        Command::Predict {
            checkpoint,
            data,
            out,
        } => commands::cmd_predict(&checkpoint, &data, &out),
        Command::Eval {
            checkpoint,
            data,
            out,
        } => commands::cmd_eval(&checkpoint, &data, out.as_deref()),
        Command::Gradcheck { seed, inject_fault } => commands::cmd_gradcheck(seed, inject_fault),
        Command::MakeToy { out, count, seed } => commands::cmd_make_toy(&out, count, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
