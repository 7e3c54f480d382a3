//! `planeseg`: synthetic data, training, inference, evaluation and reports.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "planeseg", version, about = "Box-prompted RGB-D plane segmentation")]
pub struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialisation and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic RGB-D scenes and a manifest.
    GenSynth(GenSynthArgs),
    /// Pretrain on pseudo-labels.
    Pretrain(TrainArgs),
    /// Fine-tune on annotated planes.
    Finetune(TrainArgs),
    /// Predict plane partitions from box prompts.
    Infer(InferArgs),
    /// Score predicted partitions against ground truth.
    Eval(EvalArgs),
    /// Evaluation table plus the box-noise sweep.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Also write pseudo-labels: annotation masks dilated or eroded with this probability.
    #[arg(long)]
    pub pseudo_corrupt: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest; overrides `data.train_manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Pretrained checkpoint to initialise from (finetune).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Continue an interrupted run of the same phase.
    #[arg(long, conflicts_with = "init")]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Box jitter fraction (finetune).
    #[arg(long)]
    pub noise: Option<f32>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Overrides `data.eval_manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// JSONL box file; switches the detector to `external`.
    #[arg(long)]
    pub boxes: Option<PathBuf>,
    /// Oracle box noise; overrides `detector.noise_frac`.
    #[arg(long)]
    pub noise: Option<f32>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Prediction manifest written by `infer`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset manifest with label rasters; defaults to `data.eval_manifest`.
    #[arg(long)]
    pub gt: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Overrides `data.eval_manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
