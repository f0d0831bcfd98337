//! `progseg` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
//! Every command prints a `key = value` summary on stdout; `--json <path>`
//! writes the same summary as a JSON object.

mod commands;
mod output;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "progseg", version, about = "Progressive LA and scar segmentation toolkit")]
struct Cli {
    /// Also write the summary as JSON to this path.
    #[arg(long, global = true, value_name = "PATH")]
    json: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Resample, center crop/pad and z-score a volume.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic LGE-like phantom case.
    Phantom(PhantomArgs),
    /// Apply the stochastic augmentation pipeline to an image and labels.
    Augment(AugmentArgs),
    /// Euclidean distance transform of a binary mask.
    Edt(EdtArgs),
    /// Wall band around an LA cavity mask.
    Wallmask(WallmaskArgs),
    /// Count scar voxels outside a wall band.
    Audit(AuditArgs),
    /// Evaluate the DiceCE or wall-weighted scar loss.
    Loss(LossArgs),
    /// Dsc, HD and ASD of a predicted mask.
    Evaluate(EvaluateArgs),
    /// Run the staged training pipeline on a case directory.
    Train(TrainArgs),
    /// Run one ablation baseline.
    Ablate(AblateArgs),
    /// Render axial slices with LA contour (green) and scar fill (red).
    Overlay(OverlayArgs),
}

#[derive(Args)]
pub struct PreprocessArgs {
    #[arg(long = "in", value_name = "NII")]
    pub input: PathBuf,
    #[arg(long, value_name = "NII")]
    pub out: PathBuf,
    /// Target spacing in mm.
    #[arg(long, value_parser = parse_triple::<f64>, default_value = "0.625,0.625,2.5")]
    pub spacing: [f64; 3],
    /// Target dims after center crop/pad.
    #[arg(long, value_parser = parse_triple::<usize>, default_value = "384,256,40")]
    pub size: [usize; 3],
    /// Treat the input as a binary label (nearest neighbour, no z-score).
    #[arg(long)]
    pub label: bool,
    /// Skip z-score normalization of intensity volumes.
    #[arg(long)]
    pub no_zscore: bool,
}

#[derive(Args)]
pub struct PhantomArgs {
    /// `key = value` phantom spec; defaults apply to missing keys.
    #[arg(long, value_name = "CFG")]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Receives image.nii, la.nii and scar.nii.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct AugmentArgs {
    #[arg(long = "in", value_name = "NII")]
    pub input: PathBuf,
    /// Comma-separated companion label volumes.
    #[arg(long, value_delimiter = ',', value_name = "NII,...")]
    pub labels: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `key = value` overrides of transform probabilities and ranges.
    #[arg(long, value_name = "CFG")]
    pub config: Option<PathBuf>,
    /// Outputs are written as `<prefix><input file name>`.
    #[arg(long, default_value = "aug_")]
    pub out_prefix: String,
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum SourceArg {
    /// Distance to the nearest foreground voxel.
    Fg,
    /// Distance to the nearest background voxel.
    Bg,
}

#[derive(Args)]
pub struct EdtArgs {
    #[arg(long = "in", value_name = "NII")]
    pub input: PathBuf,
    #[arg(long, value_name = "NII")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "fg")]
    pub source: SourceArg,
}

#[derive(Args)]
pub struct WallmaskArgs {
    #[arg(long, value_name = "NII")]
    pub la: PathBuf,
    /// Band thickness inside the cavity (mm).
    #[arg(long, default_value_t = 3.0)]
    pub din: f64,
    /// Band thickness outside the cavity (mm).
    #[arg(long, default_value_t = 2.5)]
    pub dout: f64,
    #[arg(long, value_name = "NII")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AuditArgs {
    #[arg(long, value_name = "NII")]
    pub scar: PathBuf,
    #[arg(long, value_name = "NII")]
    pub wall: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum ModeArg {
    Literal,
    Normalized,
}

#[derive(Args)]
pub struct LossArgs {
    /// Predicted probabilities.
    #[arg(long, value_name = "NII")]
    pub pred: PathBuf,
    #[arg(long, value_name = "NII")]
    pub gt: PathBuf,
    /// Spatial weight map (>= 1). Without it the plain DiceCE loss is used.
    #[arg(long, value_name = "NII")]
    pub weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "normalized")]
    pub mode: ModeArg,
    /// Dice share of DiceCE.
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    /// Dice smoothing constant.
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    /// CE probability clamp.
    #[arg(long, default_value_t = 1e-7)]
    pub clamp: f64,
    /// Also write dL/dpred here.
    #[arg(long, value_name = "NII")]
    pub grad_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Predicted mask or probability map (binarized at --threshold).
    #[arg(long, value_name = "NII")]
    pub pred: PathBuf,
    #[arg(long, value_name = "NII")]
    pub gt: PathBuf,
    #[arg(long, value_name = "CSV")]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value = "case")]
    pub case_id: String,
    #[arg(long, default_value = "scar")]
    pub structure: String,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Report the 95th percentile Hausdorff distance instead of the maximum.
    #[arg(long)]
    pub hd95: bool,
}

/// Options shared by `train` and `ablate`. Precedence: flags, then the
/// PROGSEG_SEED variable (seed only), then the config file, then defaults.
#[derive(Args)]
pub struct RunArgs {
    /// Directory of cases, each a subdirectory with image.nii, la.nii and
    /// optionally scar.nii. Not needed for external ablation reports.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// `key = value` run config.
    #[arg(long, value_name = "CFG")]
    pub config: Option<PathBuf>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: 250]
    #[arg(long)]
    pub max_epochs: Option<u32>,
    /// [default: 30]
    #[arg(long)]
    pub patience: Option<u32>,
    /// AdamW learning rate [default: 0.0001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training patch size, e.g. 16,16,8 [default: whole volume]
    #[arg(long, value_parser = parse_triple::<usize>)]
    pub patch: Option<[usize; 3]>,
    /// Disable augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Number of folds; one fold is held out for validation.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Comma-separated increasing stage list [default: I,II,III]
    #[arg(long, value_parser = parse_stage_list)]
    pub stages: Option<::std::vec::Vec<progseg::micronet::Stage>>,
    /// Train every fold in turn and report pooled held-out metrics.
    #[arg(long)]
    pub crossval: bool,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args)]
pub struct AblateArgs {
    /// B1, B2, B3, B4, Full or external=<metrics.csv>.
    #[arg(long, value_parser = parse_baseline)]
    pub baseline: progseg::trainer::Baseline,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args)]
pub struct OverlayArgs {
    #[arg(long, value_name = "NII")]
    pub image: PathBuf,
    #[arg(long, value_name = "NII")]
    pub la: Option<PathBuf>,
    #[arg(long, value_name = "NII")]
    pub scar: Option<PathBuf>,
    /// Comma-separated axial slice indices [default: all]
    #[arg(long, value_delimiter = ',')]
    pub slices: Vec<usize>,
    /// Pixels per voxel.
    #[arg(long, default_value_t = 4)]
    pub scale: u32,
    #[arg(long, value_name = "PNG")]
    pub out: PathBuf,
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    };
    let p = |v: &str| v.parse::<T>().map_err(|_| format!("bad value {v:?}"));
    Ok([p(a)?, p(b)?, p(c)?])
}

fn parse_stage_list(s: &str) -> Result<Vec<progseg::micronet::Stage>, String> {
    progseg::trainer::parse_stages(s).map_err(|e| e.to_string())
}

fn parse_baseline(s: &str) -> Result<progseg::trainer::Baseline, String> {
    progseg::trainer::Baseline::parse(s).map_err(|e| e.to_string())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<progseg::Error>()) {
        Some(e) if e.is_data_error() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli.command, cli.json.as_deref()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
