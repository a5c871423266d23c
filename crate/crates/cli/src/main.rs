//! `igcl`: synthesize data, train, evaluate and extract features.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use igcl::IgclError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error(transparent)]
    Core(#[from] IgclError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "igcl", version, about = "Cloth-changing person re-identification with identity-guided collaborative learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (train/query/gallery plus parse maps)
    Synth(SynthArgs),
    /// Train a model; writes the log, checkpoints and a config snapshot
    Train(TrainArgs),
    /// Rank a gallery for every query and report mAP and CMC
    Eval(EvalArgs),
    /// Write backbone features of one split with a manifest
    Extract(ExtractArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// key = value settings file; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root to create [default: $IGCL_DATA_ROOT]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Identities per side (train and test each get this many)
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub ids: Option<u64>,
    /// Images per identity
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub per_id: Option<u64>,
    /// Outfits per identity
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub clothes: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub height: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub width: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root [default: $IGCL_DATA_ROOT]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory [default: $IGCL_OUTPUT_ROOT/train]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Desk-scale model (64×32 input, 2 layers)
    #[arg(long)]
    pub tiny: bool,
    /// Stop after this many steps (0: run all epochs)
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Clothing elimination weight of the degraded image
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Identities per batch
    #[arg(short = 'P', long = "ids-per-batch")]
    pub p: Option<usize>,
    /// Images per identity in a batch
    #[arg(short = 'K', long = "images-per-id")]
    pub k: Option<usize>,
    #[arg(long)]
    pub no_cad: bool,
    #[arg(long)]
    pub no_saj: bool,
    #[arg(long)]
    pub no_pie: bool,
    #[arg(long)]
    pub no_jigsaw: bool,
    /// Input of the identity enhancement stream: orig, orig_shield, fg_shield
    #[arg(long)]
    pub shielding: Option<String>,
    /// Keep a numbered checkpoint every this many epochs
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from a training checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Initialize both feature extractors from this checkpoint's backbone
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training or inference checkpoint
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory [default: $IGCL_OUTPUT_ROOT/eval]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub query_split: Option<String>,
    #[arg(long)]
    pub gallery_split: Option<String>,
    /// Keep gallery images from the query's camera
    #[arg(long)]
    pub keep_same_camera: bool,
    /// Drop gallery images wearing the query's clothes
    #[arg(long)]
    pub cloth_changing: bool,
    /// Write an N×N cosine similarity heatmap of the first N query images
    #[arg(long, value_name = "N")]
    pub export_similarity: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory [default: $IGCL_OUTPUT_ROOT/extract]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// L2-normalize every row
    #[arg(long)]
    pub normalize: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Extract(a) => commands::extract(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
