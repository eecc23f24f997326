//! `provnet`: generate synthetic data, ingest frames into patches, train and
//! evaluate the stream networks, run inference and print reports.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 training aborted.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use provnet_core::ingest::SplitBy;

use crate::config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] provnet_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(provnet_core::Error::Aborted { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl From<provnet_engine::EngineError> for CliError {
    fn from(e: provnet_engine::EngineError) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StreamArg {
    Ind,
    Pred,
    Multi,
}

impl StreamArg {
    pub fn name(self) -> &'static str {
        match self {
            StreamArg::Ind => "ind",
            StreamArg::Pred => "pred",
            StreamArg::Multi => "multi",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitByArg {
    Video,
    Patch,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// TOML run configuration; relative paths inside resolve against its folder
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for generation, splitting and training (overrides the config)
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output folder (overrides the command's default location)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "provnet", version, about = "Video platform provenance from compression traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic compression-chain dataset (frames, sidecar, labels)
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Crop residual patches from the sidecar's frames and build the manifest
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Assign whole videos or single patches to splits
        #[arg(long, value_enum)]
        split_by: Option<SplitByArg>,
        /// Advance of the P-frame triplet window
        #[arg(long, value_name = "INT")]
        triplet_stride: Option<usize>,
        /// Comma-separated device names to keep
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        devices: Option<Vec<String>>,
    },
    /// Train one stream, or the fused head on two trained streams
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        stream: StreamArg,
    },
    /// Evaluate a trained model on the test split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        stream: StreamArg,
    },
    /// Classify one video's patches; prints class probabilities and the vote
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        stream: StreamArg,
        /// Folder of `.patch` files (defaults to `[infer] patches`)
        #[arg(value_name = "PATCH_DIR")]
        patches: Option<PathBuf>,
    },
    /// Collect evaluation reports and training histories into report.md
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common, extra: Overrides) -> Result<RunConfig, CliError> {
    RunConfig::load(
        common.config.as_deref(),
        &Overrides {
            seed: common.seed,
            ..extra
        },
    )
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { common } => commands::gen(&load(&common, Overrides::default())?, common.out),
        Command::Ingest {
            common,
            split_by,
            triplet_stride,
            devices,
        } => {
            let o = Overrides {
                split_by: split_by.map(|s| match s {
                    SplitByArg::Video => SplitBy::Video,
                    SplitByArg::Patch => SplitBy::Patch,
                }),
                triplet_stride,
                devices,
                ..Overrides::default()
            };
            commands::ingest(&load(&common, o)?, common.out)
        }
        Command::Train { common, stream } => commands::train(&load(&common, Overrides::default())?, stream, common.out),
        Command::Eval { common, stream } => commands::eval(&load(&common, Overrides::default())?, stream, common.out),
        Command::Infer {
            common,
            stream,
            patches,
        } => commands::infer(&load(&common, Overrides::default())?, stream, patches),
        Command::Report { common } => commands::report(&load(&common, Overrides::default())?, common.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
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
