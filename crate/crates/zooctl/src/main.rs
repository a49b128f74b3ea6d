mod commands;
mod exit;
mod lock;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "zooctl", version, about = "Fit, check, augment and train on implicit neural representations")]
pub struct Cli {
    /// Leave creation times out of sidecars so reruns are byte-identical.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit one image and write an INRZ file plus sidecar.
    Fit(FitArgs),
    /// Fit a directory of images under three-phase quality control.
    Qc(QcArgs),
    /// Render an INR to PNG or evaluate it at given coordinates.
    Query(QueryArgs),
    /// Render an INR under a seeded RandAugment draw.
    Augment(AugmentArgs),
    /// Draw token coordinates over an image.
    TokenizeVis(TokenizeVisArgs),
    /// Train the toy classifier jointly with a tokenizer.
    TrainToy(TrainToyArgs),
    /// Generate a synthetic corpus.
    GenToy(GenToyArgs),
    /// Fit a radiance field to posed views.
    Fit3d(Fit3dArgs),
    /// Render a radiance field at the poses of a camera manifest.
    Render3d(Render3dArgs),
    /// Recover a perturbed camera pose against a radiance field.
    RefinePose(RefinePoseArgs),
    /// Apply the scene PSNR and per-class count filter.
    FilterScenes(FilterScenesArgs),
    /// Summarize a dataset manifest.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
pub struct ArchArgs {
    /// Architecture preset: cifar, imagenet or cityscapes.
    #[arg(long, default_value = "cifar")]
    pub preset: String,
    /// Override the preset's layer count.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Override the preset's hidden width.
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub lr_min: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct QcArgs {
    /// Directory of PNG images; ids are file stems.
    #[arg(long)]
    pub in_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// JSON object mapping item id to class id.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub dataset_id: Option<String>,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value_t = 30.0)]
    pub threshold: f64,
    #[arg(long, default_value_t = 1000)]
    pub basic_iters: usize,
    #[arg(long, default_value_t = 3)]
    pub extended_multiplier: usize,
    #[arg(long, default_value_t = 10)]
    pub hard_cap_multiplier: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[arg(long)]
    pub inr: PathBuf,
    /// PNG rendering of the pixel-center grid.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Reference image; the PSNR of the rendering is reported.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// JSON array of [x, y] pairs to evaluate; RGB values go to stdout.
    #[arg(long)]
    pub coords: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PoolArg {
    All,
    Affine,
    Magnitude,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    pub inr: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub n_ops: usize,
    #[arg(long, default_value_t = 0.5)]
    pub magnitude: f64,
    #[arg(long, value_enum, default_value_t = PoolArg::All)]
    pub pool: PoolArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Write the sampled op list as JSON.
    #[arg(long)]
    pub spec_out: Option<PathBuf>,
    /// Write the INR with the geometric part folded into its first layer.
    #[arg(long)]
    pub inr_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TokenizeVisArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Grouping snapshot written by train-toy.
    #[arg(long, conflicts_with_all = ["trajectory"])]
    pub grouping: Option<PathBuf>,
    /// Coordinate trajectory written by train-toy.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Trajectory frame (epoch index); defaults to the last.
    #[arg(long, requires = "trajectory")]
    pub frame: Option<usize>,
    #[arg(long, default_value = "uniform")]
    pub strategy: String,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub patch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Background image; an INR may be given instead.
    #[arg(long)]
    pub background: Option<PathBuf>,
    #[arg(long, conflicts_with = "background")]
    pub inr: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
}

#[derive(Args, Debug)]
pub struct TrainToyArgs {
    /// Manifest written by qc; items need class ids.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "learnable-pixels")]
    pub strategy: String,
    #[arg(long, default_value_t = 4)]
    pub patch: usize,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub lr_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_reg: f64,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 32)]
    pub embed: usize,
    #[arg(long, default_value_t = 0.25)]
    pub val_fraction: f64,
    /// RandAugment ops per item; 0 disables augmentation.
    #[arg(long, default_value_t = 0)]
    pub aug_ops: usize,
    #[arg(long, default_value_t = 0.5)]
    pub aug_magnitude: f64,
    /// Also write per-epoch token coordinates.
    #[arg(long)]
    pub trajectory: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ToyKind {
    Bars,
    Gradients,
    Boxes3d,
}

#[derive(Args, Debug)]
pub struct GenToyArgs {
    #[arg(long, value_enum)]
    pub kind: ToyKind,
    /// Image count (bars, gradients) or training cameras (boxes3d).
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// boxes3d: held-out views between the training cameras.
    #[arg(long, default_value_t = 2)]
    pub held_out: usize,
    /// boxes3d: render the scene with no objects.
    #[arg(long)]
    pub empty: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct Fit3dArgs {
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 256)]
    pub rays: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub levels: usize,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct Render3dArgs {
    #[arg(long)]
    pub inr: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct RefinePoseArgs {
    #[arg(long)]
    pub inr: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
    /// Index into the manifest's view list.
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    #[arg(long, default_value_t = 5.0)]
    pub rot_deg: f64,
    #[arg(long, default_value_t = 0.4)]
    pub trans: f64,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 256)]
    pub rays: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FilterScenesArgs {
    /// JSON array of {scene_id, class_id, psnr}.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = izoo_core::qc::SCENE_MIN_PSNR)]
    pub min_psnr: f64,
    #[arg(long, default_value_t = izoo_core::qc::SCENE_MIN_PER_CLASS)]
    pub min_per_class: usize,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Check every referenced weight file against its CRC.
    #[arg(long)]
    pub verify: bool,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                std::process::exit(0);
            }
            exit::report("usage", exit::USAGE, e.to_string().trim());
            std::process::exit(exit::USAGE);
        }
    };
    if let Err(e) = commands::run(&cli) {
        let (kind, code) = exit::classify(&e);
        exit::report(kind, code, &format!("{e:#}"));
        std::process::exit(code);
    }
}
