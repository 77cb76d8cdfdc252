mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Mask-conditioned diffusion inpainting on a synthetic shapes world.
#[derive(Parser, Debug)]
#[command(name = "maskdiff", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags every subcommand accepts. Flags win over config-file values.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config file for the subcommand
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a shapes dataset (PNG images, masks and a manifest)
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_enum)]
        split: Option<config::Split>,
    },
    /// Train (or resume) a denoiser into a run directory
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by gen-data
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Inpaint one image
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: config::SampleArgs,
    },
    /// Write the precision ladder m_0..m_S of a mask
    MaskLadder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Score a directory of sampled tuples
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding items.jsonl (as written by `sample`)
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Probe written by train-probe
        #[arg(long)]
        probe: Option<PathBuf>,
    },
    /// Train the crop classifier used for prompt-consistency scores
    TrainProbe {
        #[command(flatten)]
        common: Common,
        /// Dataset directory whose spec.json defines the shapes
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
