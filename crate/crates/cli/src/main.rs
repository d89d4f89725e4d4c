//! `waterformer` command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error
//! (unreadable inputs, corrupt checkpoints, mismatched directories),
//! 4 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "waterformer", version, about = "Underwater image enhancement: synthesize data, train, enhance, evaluate")]
pub struct Cli {
    /// Log verbosity on stderr (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Degrade clean images with the water model into a paired corpus.
    Synthesize(SynthesizeArgs),
    /// Train a model on a paired corpus.
    Train(TrainArgs),
    /// Enhance images with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Score predictions with full- and no-reference metrics.
    Evaluate(EvaluateArgs),
    /// Train and score several ablation variants with identical settings.
    Ablate(AblateArgs),
    /// Show a model's size and cost, or a checkpoint's metadata.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    /// Directory of clean PNG/JPEG images. Without it, procedural scenes are
    /// generated into `<out>/clean`.
    #[arg(long, visible_alias = "clean-dir")]
    pub clean: Option<PathBuf>,
    /// Output directory for degraded/, reference/, truth/ and manifest.csv.
    #[arg(long, visible_alias = "out-dir")]
    pub out: PathBuf,
    /// Comma-separated water type ids; every instance is degraded once per type.
    #[arg(long, default_value = "3,7")]
    pub types: String,
    /// Number of clean instances.
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Smallest scene depth in metres.
    #[arg(long, default_value_t = 0.5)]
    pub depth_min: f64,
    /// Largest scene depth in metres.
    #[arg(long, default_value_t = 3.0)]
    pub depth_max: f64,
    /// Probability of a top-to-bottom depth ramp instead of a constant depth.
    #[arg(long, default_value_t = 0.5)]
    pub gradient_prob: f64,
    /// Side length of generated procedural scenes.
    #[arg(long, default_value_t = 64)]
    pub scene_size: usize,
    /// TOML file replacing the built-in water type table.
    #[arg(long)]
    pub water_table: Option<PathBuf>,
    /// Seed of every random draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Small images and few epochs (the default settings).
    Desk,
    /// 256x256 training for 300 epochs.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

/// Training settings shared by `train` and `ablate`. Each flag overrides the
/// config file, which overrides the preset.
#[derive(Args, Debug, Default)]
pub struct TrainOverrides {
    /// TOML training config (any subset of fields).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting point before the config file and flags are applied.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Pairs per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs between learning-rate decays.
    #[arg(long)]
    pub decay_every: Option<usize>,
    /// Multiplier applied at each decay.
    #[arg(long)]
    pub decay_factor: Option<f64>,
    /// Seed of initialization, shuffling and augmentation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Square training size; 0 keeps native sizes.
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Weight of the L1 term.
    #[arg(long)]
    pub w_l1: Option<f64>,
    /// Weight of the chroma term.
    #[arg(long)]
    pub w_chroma: Option<f64>,
    /// Weight of the Sobel term.
    #[arg(long)]
    pub w_sobel: Option<f64>,
    /// Global gradient-norm clipping threshold.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Disable random flips and rotations.
    #[arg(long)]
    pub no_augment: bool,
    /// Floating-point precision of parameters and activations.
    #[arg(long, value_enum)]
    pub dtype: Option<Precision>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Steps between progress lines.
    #[arg(long)]
    pub log_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Manifest of the paired corpus.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints and loss curves.
    #[arg(long)]
    pub out: PathBuf,
    /// Ablation variant to train (base, v1..v5, relu_mlp, recon_plain, recon_soft, skfusion).
    #[arg(long)]
    pub variant: Option<String>,
    /// Continue from `<out>/last.wfk`.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    /// Trained checkpoint (.wfk).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory; results are PNGs named after the inputs.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SsimModeArg {
    Luma,
    PerChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NrmseArg {
    Euclidean,
    MinMax,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of predicted images.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of reference images, matched to predictions by file stem, or
    /// a corpus manifest whose entry ids name the predictions.
    #[arg(long, conflicts_with = "no_ref", required_unless_present = "no_ref")]
    pub r#ref: Option<PathBuf>,
    /// Only compute the no-reference scores (UCIQE, UIQM).
    #[arg(long)]
    pub no_ref: bool,
    /// CSV report path (default `<pred>/metrics.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// SSIM on luma or averaged over RGB channels.
    #[arg(long, value_enum, default_value = "luma")]
    pub ssim_mode: SsimModeArg,
    /// NRMSE normalization.
    #[arg(long, value_enum, default_value = "euclidean")]
    pub nrmse_norm: NrmseArg,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Comma-separated variants, e.g. base,v1,v2,v3,v4,v5.
    #[arg(long, default_value = "base,v1,v2,v3,v4,v5")]
    pub variants: String,
    /// Manifest of the paired corpus.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for per-variant runs and the summary tables.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Checkpoint to describe; without it the configured model is described.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Variant applied to the configured model.
    #[arg(long)]
    pub variant: Option<String>,
    /// Image side used for the multiply-accumulate count.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// List every parameter tensor.
    #[arg(long)]
    pub tensors: bool,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = commands::exit_code(&err);
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
