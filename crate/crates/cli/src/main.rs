//! `metafsod`: generate data, train, predict, evaluate and ablate.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

const OVERRIDE_HELP: &str = "Config overrides:\n  Any key of the recipe config can be set as --section.key VALUE, for example\n  --train.lambda 0.1 or --model.leaky_slope=0.2. VALUE is parsed as JSON and\n  falls back to a plain string. Sections: data, model, train.";

#[derive(Debug, Parser)]
#[command(name = "metafsod", version, about = "Toy few-shot object detection with meta-learned reweighting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Partition a dataset into train/test images and base/novel classes.
    Split(SplitArgs),
    /// Run one training phase.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Write detections for a dataset subset.
    Predict(PredictArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Run the full recipe for several lambda values and seeds.
    #[command(after_help = OVERRIDE_HELP)]
    AblateLambda(AblateArgs),
    /// Print model statistics.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of shape classes.
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    /// Number of images.
    #[arg(long, default_value_t = 300)]
    pub images: usize,
    /// Generator seed [default: 7].
    #[arg(long, env = "METAFSOD_SEED")]
    pub seed: Option<u64>,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    /// Fewest objects per image.
    #[arg(long, default_value_t = 1)]
    pub min_objects: usize,
    /// Most objects per image.
    #[arg(long, default_value_t = 3)]
    pub max_objects: usize,
    /// Smallest object diameter in pixels.
    #[arg(long, default_value_t = 10)]
    pub min_size: usize,
    /// Largest object diameter in pixels.
    #[arg(long, default_value_t = 24)]
    pub max_size: usize,
    /// Standard deviation of the additive pixel noise.
    #[arg(long, default_value_t = 0.04)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output split file [default: DATA/split.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fraction of images in the train subset.
    #[arg(long, default_value_t = 2.0 / 3.0)]
    pub train_fraction: f64,
    /// Comma-separated novel class ids.
    #[arg(long, value_delimiter = ',', default_value = "3,4")]
    pub novel: Vec<u32>,
    /// Shuffle seed [default: 7].
    #[arg(long, env = "METAFSOD_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    /// Train on base classes from scratch.
    #[command(after_help = OVERRIDE_HELP)]
    Base(TrainArgs),
    /// Fine-tune a base checkpoint on the K-shot episode.
    #[command(after_help = OVERRIDE_HELP)]
    Finetune(FinetuneArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Split file [default: DATA/split.json].
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Recipe config JSON; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoint, log, episode and run manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Epochs for this phase, overriding the config.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training seed, overriding the config.
    #[arg(long, env = "METAFSOD_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Directory holding the base checkpoint.
    #[arg(long)]
    pub base: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory holding checkpoint.json, weights.bin and episode.json.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Split file [default: DATA/split.json].
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Images to predict on.
    #[arg(long, value_enum, default_value_t = Subset::Test)]
    pub subset: Subset,
    /// Episode whose support set provides the class vectors [default: MODEL/episode.json].
    #[arg(long)]
    pub support: Option<PathBuf>,
    /// Output detections file (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Minimum detection confidence.
    #[arg(long, default_value_t = metafsod::infer::DEFAULT_CONF_THR)]
    pub conf_thr: f64,
    /// NMS overlap threshold.
    #[arg(long, default_value_t = metafsod::infer::DEFAULT_IOU_THR)]
    pub iou_thr: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detections file (JSON lines).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth dataset directory.
    #[arg(long)]
    pub gt: PathBuf,
    /// Split file [default: GT/split.json].
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Images to score.
    #[arg(long, value_enum, default_value_t = Subset::Test)]
    pub subset: Subset,
    /// IoU needed for a true positive.
    #[arg(long, default_value_t = 0.5)]
    pub iou_thr: f64,
    /// Output directory for report.json, report.csv and report.svg.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated lambda values.
    #[arg(long, value_delimiter = ',', default_value = "0,0.001,0.005,0.01,0.1,0.5")]
    pub values: Vec<f64>,
    /// Number of consecutive seeds per value.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// First seed, overriding the config.
    #[arg(long, env = "METAFSOD_SEED")]
    pub seed: Option<u64>,
    /// Recipe config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for ablation.csv, ablation.svg and ablation.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Print the parameter count.
    #[arg(long, required = true)]
    pub params: bool,
    /// Count a saved checkpoint instead of a freshly built model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Recipe config JSON for the freshly built model.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let (rest, overrides) = match config::extract_overrides(args[1..].to_vec()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(std::iter::once(args[0].clone()).chain(rest)) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(cli.command, &args[1..], &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
