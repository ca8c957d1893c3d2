//! Loading of command inputs: frame manifests, intrinsics, optimizer config,
//! initial parameters and per-frame motion files.

use std::fs;
use std::path::{Path, PathBuf};

use lcsync::odometry::{estimate_velocity, load_velocity_csv, OdometryError, RansacConfig};
use lcsync::semantic_io::{load_correspondences_csv, load_mask_pgm, load_point_cloud_csv};
use lcsync::{CalibrationParams, CameraIntrinsics, OptimizerConfig, SemanticMask, SemanticPointCloud};
use nalgebra::Vector3;
use serde::Deserialize;

use crate::{CliError, FrameArgs};

fn floats(text: &str, n: usize, what: &str) -> Result<Vec<f64>, CliError> {
    let v: Result<Vec<f64>, _> = text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    match v {
        Ok(v) if v.len() == n && v.iter().all(|x| x.is_finite()) => Ok(v),
        _ => Err(CliError::Usage(format!("{what}: expected {n} comma-separated numbers, got '{text}'"))),
    }
}

pub fn parse_vec3(text: &str, what: &str) -> Result<Vector3<f64>, CliError> {
    let v = floats(text, 3, what)?;
    Ok(Vector3::new(v[0], v[1], v[2]))
}

#[derive(Deserialize)]
struct ParamsFile {
    axis_angle_rad: [f64; 3],
    translation_m: [f64; 3],
    #[serde(default)]
    delay_s: f64,
}

/// `"tx,ty,tz,rx,ry,rz"` or a JSON file carrying `axis_angle_rad`,
/// `translation_m` and optionally `delay_s` (result.json and gt.json both do).
pub fn parse_init(text: &str) -> Result<CalibrationParams, CliError> {
    if text.split(',').count() == 6 && !Path::new(text).exists() {
        let v = floats(text, 6, "--init")?;
        return Ok(CalibrationParams::new(Vector3::new(v[3], v[4], v[5]), Vector3::new(v[0], v[1], v[2]), 0.0));
    }
    let raw = fs::read_to_string(text).map_err(|e| CliError::Io(format!("{text}: {e}")))?;
    let p: ParamsFile = serde_json::from_str(&raw).map_err(|e| CliError::Usage(format!("{text}: {e}")))?;
    Ok(CalibrationParams::new(p.axis_angle_rad.into(), p.translation_m.into(), p.delay_s))
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    CameraIntrinsics::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn load_config(base: OptimizerConfig, args: &FrameArgs) -> Result<OptimizerConfig, CliError> {
    let mut c = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            base.parse_key_value(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => base,
    };
    if let Some(seed) = args.seed {
        c.sample_seed = seed;
    }
    Ok(c)
}

/// One manifest line with paths resolved against the manifest's directory.
#[derive(Debug, Clone)]
pub struct FrameEntry {
    pub cloud: PathBuf,
    pub mask: PathBuf,
    pub motion: Option<PathBuf>,
}

pub fn parse_frame_manifest(text: &str, base: &Path) -> Result<Vec<FrameEntry>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(2..=3).contains(&fields.len()) || fields.iter().any(|f| f.is_empty()) {
            return Err(CliError::Usage(format!(
                "frame manifest line {}: expected cloud_path,mask_path[,velocity_or_corr_path]",
                i + 1
            )));
        }
        let resolve = |f: &str| base.join(f);
        out.push(FrameEntry { cloud: resolve(fields[0]), mask: resolve(fields[1]), motion: fields.get(2).map(|f| resolve(f)) });
    }
    if out.is_empty() {
        return Err(CliError::Usage("frame manifest lists no frames".into()));
    }
    Ok(out)
}

pub fn frame_entries(args: &FrameArgs, motion: Option<&PathBuf>) -> Result<Vec<FrameEntry>, CliError> {
    match (&args.frames, &args.cloud, &args.mask) {
        (Some(path), _, _) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            parse_frame_manifest(&text, path.parent().unwrap_or(Path::new(".")))
        }
        (None, Some(cloud), Some(mask)) => Ok(vec![FrameEntry { cloud: cloud.clone(), mask: mask.clone(), motion: motion.cloned() }]),
        _ => Err(CliError::Usage("either --frames or --cloud with --mask is required".into())),
    }
}

pub fn load_frame_data(entry: &FrameEntry) -> Result<(SemanticPointCloud, SemanticMask), CliError> {
    Ok((load_point_cloud_csv(&entry.cloud)?, load_mask_pgm(&entry.mask)?))
}

/// Motion file kinds, told apart by their header comment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionKind {
    Velocity,
    Correspondences,
}

pub fn motion_kind(path: &Path) -> Result<MotionKind, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let first = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let header: String = first.trim_start_matches('#').chars().filter(|c| !c.is_whitespace()).collect();
    Ok(if first.starts_with('#') && header.starts_with("u1,v1,u2,v2") { MotionKind::Correspondences } else { MotionKind::Velocity })
}

pub struct MotionOptions {
    pub speed: Option<f64>,
    pub frame_dt: f64,
    pub ransac: RansacConfig,
}

/// Camera-frame velocity of manifest frame `index`.
pub fn load_motion(path: &Path, index: usize, k: &CameraIntrinsics, opts: &MotionOptions) -> Result<Vector3<f64>, CliError> {
    match motion_kind(path)? {
        MotionKind::Velocity => {
            let rows = load_velocity_csv(path)?;
            let row = match rows.as_slice() {
                [only] => *only,
                _ => *rows.iter().find(|r| r.frame_id == index as i64).ok_or_else(|| {
                    CliError::Usage(format!("{}: no velocity row for frame {index}", path.display()))
                })?,
            };
            Ok(row.v)
        }
        MotionKind::Correspondences => {
            let speed = opts.speed.ok_or_else(|| {
                CliError::Usage(format!("{}: correspondences need --speed (monocular scale is unknown)", path.display()))
            })?;
            let corr = load_correspondences_csv(path)?;
            let (v, _) = estimate_velocity(&corr, k, &opts.ransac, speed, opts.frame_dt, index as i64)
                .map_err(|e| {
                    let msg = format!("{}: {e}", path.display());
                    match e {
                        OdometryError::InsufficientParallax { .. } => CliError::Unidentifiable(msg),
                        OdometryError::InvalidInput(_) => CliError::Usage(msg),
                        _ => CliError::Optimization(msg),
                    }
                })?;
            Ok(v.v)
        }
    }
}
