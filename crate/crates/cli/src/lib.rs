//! `lcsync` command-line front end.
//!
//! Exit codes are stable: 0 ok, 2 usage or bad input, 3 I/O, 4 optimization
//! failure, 5 unidentifiable delay (zero excitation).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
mod inputs;
pub mod overlay;

pub use inputs::{parse_init, parse_vec3};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Optimization(String),
    #[error("{0}")]
    Unidentifiable(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Optimization(_) => 4,
            CliError::Unidentifiable(_) => 5,
        }
    }
}

impl From<lcsync::LoadError> for CliError {
    fn from(e: lcsync::LoadError) -> Self {
        match e {
            lcsync::LoadError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<lcsync::ReportError> for CliError {
    fn from(e: lcsync::ReportError) -> Self {
        match e {
            lcsync::ReportError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<lcsync::AlignmentError> for CliError {
    fn from(e: lcsync::AlignmentError) -> Self {
        match e {
            lcsync::AlignmentError::ClassAbsent { class_id } => {
                CliError::Optimization(format!("class absent: no pixel of class {class_id} in the mask"))
            }
            other => CliError::Optimization(other.to_string()),
        }
    }
}

impl From<lcsync::CalibrateError> for CliError {
    fn from(e: lcsync::CalibrateError) -> Self {
        match e {
            lcsync::CalibrateError::InvalidConfig(_) | lcsync::CalibrateError::ConfigParse { .. } => CliError::Usage(e.to_string()),
            other => CliError::Optimization(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lcsync", version, about = "LIDAR-camera extrinsic and time-delay calibration from semantic masks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene bundle with ground truth.
    Synth(SynthArgs),
    /// Refine the extrinsic on static frames.
    CalibrateStatic(StaticArgs),
    /// Estimate extrinsic and time delay on moving frames.
    CalibrateJoint(JointArgs),
    /// Compare result files against ground truth.
    Eval(EvalArgs),
    /// Draw projected points over the mask as a PPM image.
    RenderOverlay(OverlayArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    pub clusters: usize,
    #[arg(long, default_value_t = 200)]
    pub points_per_cluster: usize,
    /// Number of frames; frame k uses seed + k.
    #[arg(long, default_value_t = 1)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Ground-truth time delay in seconds.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub delay: f64,
    /// Camera-frame velocity "vx,vy,vz" in m/s.
    #[arg(long, default_value = "0,0,0", allow_hyphen_values = true)]
    pub velocity: String,
    /// Seconds between the two views used for the correspondence file.
    #[arg(long, default_value_t = 0.1)]
    pub frame_dt: f64,
    /// Fraction of outlier correspondences.
    #[arg(long, default_value_t = 0.0)]
    pub outliers: f64,
    /// Probability of swapping a cloud label between object and background.
    #[arg(long, default_value_t = 0.0)]
    pub label_flip: f64,
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FrameArgs {
    /// Frame manifest, one "cloud_path,mask_path[,velocity_or_corr_path]" per line.
    #[arg(long)]
    pub frames: Option<PathBuf>,
    /// Single-frame alternative to --frames.
    #[arg(long, requires = "mask", conflicts_with = "frames")]
    pub cloud: Option<PathBuf>,
    #[arg(long, requires = "cloud")]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub class_id_cloud: u32,
    #[arg(long, default_value_t = 13)]
    pub class_id_mask: u32,
    /// Optimizer overrides as key=value lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pixel sampling seed; overrides sample_seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ground truth; when given, metrics are written next to the result.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StaticArgs {
    #[command(flatten)]
    pub frames: FrameArgs,
    /// Initial extrinsic: a JSON file with axis_angle_rad and translation_m,
    /// or "tx,ty,tz,rx,ry,rz" (meters, axis-angle radians).
    #[arg(long, allow_hyphen_values = true)]
    pub init: String,
}

#[derive(Debug, Args)]
pub struct JointArgs {
    #[command(flatten)]
    pub frames: FrameArgs,
    /// result.json of the static stage.
    #[arg(long = "static")]
    pub static_result: PathBuf,
    /// Velocity or correspondence CSV for the single-frame form.
    #[arg(long, requires = "cloud")]
    pub motion: Option<PathBuf>,
    /// Ego speed in m/s; required when motion comes from correspondences.
    #[arg(long)]
    pub speed: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub frame_dt: f64,
    /// Initial delay in seconds; a grid search picks one when omitted.
    #[arg(long, allow_hyphen_values = true)]
    pub init_delay: Option<f64>,
    /// Grid search range "lo,hi" in seconds.
    #[arg(long, default_value = "-0.5,0.5", allow_hyphen_values = true)]
    pub delay_range: String,
    #[arg(long, default_value_t = 0.01)]
    pub delay_step: f64,
    #[arg(long, default_value_t = 500)]
    pub ransac_iterations: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long = "result", required = true)]
    pub results: Vec<PathBuf>,
    /// One ground truth for all results, or one per result.
    #[arg(long = "gt", required = true)]
    pub gts: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    /// Extrinsic in the same forms as --init; a result.json also supplies the delay.
    #[arg(long, allow_hyphen_values = true)]
    pub params: String,
    #[arg(long, allow_hyphen_values = true)]
    pub velocity: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub delay: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub class_id_cloud: u32,
    #[arg(long, default_value_t = 13)]
    pub class_id_mask: u32,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let outcome = match &cli.command {
        Command::Synth(a) => commands::synth(a, &argv),
        Command::CalibrateStatic(a) => commands::calibrate_static(a, &argv),
        Command::CalibrateJoint(a) => commands::calibrate_joint(a, &argv),
        Command::Eval(a) => commands::eval(a, &argv),
        Command::RenderOverlay(a) => commands::render_overlay(a, &argv),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
