use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fcseg::data::LabelRatio;
use fcseg::trainer::TrainMode;

/// Semi-supervised building segmentation with feature and output consistency.
#[derive(Debug, Parser)]
#[command(name = "fcseg", version)]
pub struct Cli {
    /// Random seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic patch dataset directory.
    GenData(GenDataArgs),
    /// Perturbation depth from building sizes and resolution.
    Depth(DepthArgs),
    /// Train a model on a patch dataset.
    Train(TrainArgs),
    /// Score a checkpoint's main branch on a split.
    Eval(EvalArgs),
    /// Local-variation heatmaps of encoder features.
    Probe(ProbeArgs),
    /// Train every mode over shared seeds and compare.
    Ablate(AblateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Depth(_) => "depth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Probe(_) => "probe",
            Command::Ablate(_) => "ablate",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Total number of patches.
    #[arg(long)]
    pub n: usize,
    /// Ground resolution in meters per pixel.
    #[arg(long)]
    pub resolution: Option<f64>,
    /// Labeled-to-unlabeled ratio, e.g. 1:10.
    #[arg(long, default_value = "1:10")]
    pub ratio: LabelRatio,
    /// Validation patches [default: 10% of n].
    #[arg(long)]
    pub val: Option<usize>,
    /// Test patches [default: 15% of n].
    #[arg(long)]
    pub test: Option<usize>,
    /// Patch side in pixels [default: 128].
    #[arg(long)]
    pub patch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DepthArgs {
    /// Ground resolution in meters per pixel.
    #[arg(long)]
    pub resolution: f64,
    /// Directory of binary mask PNGs (or a dataset directory with masks/).
    #[arg(long, conflicts_with = "lengths", required_unless_present = "lengths")]
    pub masks: Option<PathBuf>,
    /// Mean shorter and longer building side in meters.
    #[arg(long, num_args = 2, value_names = ["L_MIN", "L_MAX"])]
    pub lengths: Option<Vec<f64>>,
    /// Deepest encoder stage available.
    #[arg(long, default_value_t = 5)]
    pub max_depth: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Number of iterations; overrides the config file.
    #[arg(long)]
    pub iters: Option<u64>,
    /// Training mode; overrides the config file.
    #[arg(long)]
    pub mode: Option<TrainMode>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// labeled, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Identifier written in the CSV row [default: checkpoint directory name].
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Encoder depth whose activations are probed (0 is the input image).
    #[arg(long)]
    pub depth: usize,
    /// Trained checkpoint [default: freshly initialized model].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Maximum number of patches.
    #[arg(long, default_value_t = 16)]
    pub limit: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated seeds shared by every mode.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Comma-separated modes [default: all four].
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<TrainMode>,
    /// Number of iterations; overrides the config file.
    #[arg(long)]
    pub iters: Option<u64>,
}
