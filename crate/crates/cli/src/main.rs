//! `mtu`: synthesis, augmentation, tiling, training, inference,
//! post-processing and evaluation for infrared tiny-target detection.

mod commands;
mod dataset;
mod exit;
mod settings;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mtu_core::loss::LossKind;
use mtu_core::Error;

#[derive(Parser, Debug)]
#[command(name = "mtu", version, about = "Infrared tiny-target detection pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: Global,
}

#[derive(Args, Debug)]
pub struct Global {
    /// JSON settings file for the subcommand; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

impl Global {
    pub fn out(&self) -> anyhow::Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("--out is required".into()).into())
    }

    pub fn jobs(&self) -> usize {
        self.jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Copy-rotate-resize-paste targets into a dataset.
    Augment(AugmentArgs),
    /// Cut every scene of a dataset into square tiles.
    Tile(TileArgs),
    /// Train a network and write its checkpoint and step log.
    Train(TrainArgs),
    /// Write whole-image probability maps.
    Predict(PredictArgs),
    /// Threshold probability maps and extract 8-connected regions.
    Cluster(ClusterArgs),
    /// Pooled Pd, Fa and IoU of predictions against ground truth.
    Eval(EvalArgs),
    /// Pd and Fa over a threshold grid.
    Roc(RocArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: Option<usize>,
    /// Side length of each scene.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub paste_count: Option<usize>,
    /// Also apply random flips and blur with default settings.
    #[arg(long)]
    pub classic: bool,
}

#[derive(Args, Debug)]
pub struct TileArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub tile_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Fixed step count, overriding epochs.
    #[arg(long)]
    pub steps: Option<usize>,
    /// focal-iou, focal or soft-iou.
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub smooth: Option<f64>,
    /// Backpropagate through the SoftIoU factor as well.
    #[arg(long)]
    pub differentiate_iou: bool,
    /// Drop the transformer branches.
    #[arg(long)]
    pub no_mvtm: bool,
    /// Train on the raw tiles without flips or blur.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Write exact f32 dumps instead of 16-bit PNG.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Keep pixels with probability strictly above this value.
    #[arg(long, conflicts_with = "adaptive_tau")]
    pub tau: Option<f64>,
    /// Per-image threshold max(0.7 max, 0.5 std + mean).
    #[arg(long)]
    pub adaptive_tau: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of ground-truth masks named `<id>.png`.
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long, conflicts_with = "adaptive_tau")]
    pub tau: Option<f64>,
    #[arg(long)]
    pub adaptive_tau: bool,
    /// Centroid matching radius in pixels.
    #[arg(long)]
    pub d_thresh: Option<f64>,
}

#[derive(Args, Debug)]
pub struct RocArgs {
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Number of evenly spaced thresholds in [0, 1].
    #[arg(long)]
    pub taus: Option<usize>,
    #[arg(long)]
    pub d_thresh: Option<f64>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            std::process::exit(0);
        }
        Err(e) => std::process::exit(exit::report(exit::Kind::Config, e.to_string().trim_end())),
    };
    if let Err(e) = commands::run(&cli) {
        std::process::exit(exit::report(exit::Kind::of(&e), &format!("{e:#}")));
    }
}
