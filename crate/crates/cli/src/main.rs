//! Command-line front end for the refinement pipeline.
//!
//! Every subcommand writes only under `--out-dir`. Settings are resolved as
//! built-in defaults, then the `--config` file, then `--set key=value`
//! assignments and dedicated flags. Runtime failures print one
//! `ERROR <code> <message>` line on stderr and exit with status 1; usage
//! errors exit with status 2.

mod commands;
mod grid;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "synthrefine", version, about = "Refine synthetic eye images towards a real domain and evaluate gaze estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random choice; overrides the config file's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory that receives all outputs.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Worker threads for parallel evaluation.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Configuration file in `key = value` form.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Log progress to stderr.
    #[arg(short, long)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic (or domain-shifted) eye dataset with exact masks.
    Synth(SynthArgs),
    /// Train the eye-region segmenter on a manifest with masks.
    TrainSegmenter(TrainSegmenterArgs),
    /// Segment every image of a manifest.
    Segment(SegmentArgs),
    /// Train the two-scale refiner on synthetic and real manifests.
    TrainRefiner(TrainRefinerArgs),
    /// Refine every image of a manifest with a trained refiner.
    Refine(RefineArgs),
    /// Train gaze estimators on one or more sets and score them on a test set.
    EvalGaze(EvalGazeArgs),
    /// Rebuild the loss log, results table and image grids of a training run.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of images.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Square image side in pixels (at least 32).
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Half-width of the uniform yaw and pitch range, in radians.
    #[arg(long, default_value_t = 0.5)]
    pub gaze_range: f64,
    /// Apply the pseudo-real appearance shift and label the set `real`.
    #[arg(long)]
    pub shifted: bool,
}

#[derive(Args, Debug)]
pub struct TrainSegmenterArgs {
    #[command(flatten)]
    pub common: Common,
    /// Manifest whose rows all carry masks.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Square side the images are resized to for training and inference.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Epochs; defaults to the config's `seg_epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Segmenter directory or checkpoint file.
    #[arg(long)]
    pub segmenter: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainRefinerArgs {
    #[command(flatten)]
    pub common: Common,
    /// Synthetic training manifest.
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    /// Real (style reference) manifest.
    #[arg(long)]
    pub real: Option<PathBuf>,
    /// Segmenter directory or checkpoint; masks of the real set (and of
    /// synthetic rows without one) come from it.
    #[arg(long)]
    pub segmenter: Option<PathBuf>,
    /// Iterations of the three stages, e.g. `300,200,200`.
    #[arg(long, value_name = "G,L,J")]
    pub stage_iters: Option<String>,
    /// Working side of the global generator.
    #[arg(long)]
    pub train_resolution: Option<usize>,
    /// Checkpoint interval in iterations.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Training run directory; its `config.cfg` and `refiner/final.ckpt`
    /// are used unless overridden.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Refiner checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Segmenter for rows without masks.
    #[arg(long)]
    pub segmenter: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalGazeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training manifest; may be repeated.
    #[arg(long, required = true)]
    pub train: Vec<PathBuf>,
    /// Test manifest.
    #[arg(long)]
    pub test: PathBuf,
    /// Estimator kind (`knn`, `rf`, `cnn`); may be repeated.
    #[arg(long, default_value = "knn")]
    pub estimator: Vec<String>,
    /// Neighbours for k-NN.
    #[arg(long, default_value_t = synthrefine::gazeval::DEFAULT_K)]
    pub k: usize,
    /// Trees for the random forest.
    #[arg(long, default_value_t = synthrefine::gazeval::DEFAULT_TREES)]
    pub trees: usize,
    /// Estimator input size as `HxW`.
    #[arg(long, value_name = "HxW")]
    pub input_size: Option<String>,
    /// Add empty rows for the published-only baselines.
    #[arg(long)]
    pub reserved_rows: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory written by `train-refiner`.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Test manifest for the results table; defaults to the run's real set.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Neighbours for the k-NN estimator of the results table.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Rows per image grid.
    #[arg(long, default_value_t = 4)]
    pub grid_rows: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let verbose = match &cli.command {
        Command::Synth(a) => a.common.verbose,
        Command::TrainSegmenter(a) => a.common.verbose,
        Command::Segment(a) => a.common.verbose,
        Command::TrainRefiner(a) => a.common.verbose,
        Command::Refine(a) => a.common.verbose,
        Command::EvalGaze(a) => a.common.verbose,
        Command::Report(a) => a.common.verbose,
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if verbose { "info" } else { "warn" }))
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::TrainSegmenter(a) => commands::train_segmenter(a),
        Command::Segment(a) => commands::segment(a),
        Command::TrainRefiner(a) => commands::train_refiner(a),
        Command::Refine(a) => commands::refine(a),
        Command::EvalGaze(a) => commands::eval_gaze(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("ERROR {} {}", e.code(), message);
            ExitCode::from(1)
        }
    }
}
