//! Machine-readable run outputs: `result.json` and `gt.json`.
//!
//! Floats are written by serde_json in shortest round-trip form, so equal
//! results serialize to identical bytes. Non-finite losses are stored as
//! `null`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::calibrate::{CalibrationResult, CalibrationStatus};
use crate::geometry::{matrix_to_quaternion, CalibrationParams};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: unknown status '{status}'")]
    Status { path: PathBuf, status: String },
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub w: f64,
    pub loss: Option<f64>,
    pub axis_angle_rad: [f64; 3],
    pub translation_m: [f64; 3],
    pub delay_s: f64,
}

/// Contents of `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub axis_angle_rad: [f64; 3],
    pub translation_m: [f64; 3],
    pub quaternion_wxyz: [f64; 4],
    pub delay_s: f64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
    pub final_loss: Option<f64>,
    pub iterations: usize,
    pub n_elements: usize,
    #[serde(default)]
    pub excluded_frames: Vec<usize>,
    #[serde(default)]
    pub trace: Vec<TraceRecord>,
}

impl ResultFile {
    pub fn from_result(result: &CalibrationResult) -> Self {
        let p = &result.params;
        // nalgebra stores (i, j, k, w)
        let q = matrix_to_quaternion(&p.rotation()).map(|q| q.coords).unwrap_or_default();
        Self {
            axis_angle_rad: arr(&p.axis_angle),
            translation_m: arr(&p.translation),
            quaternion_wxyz: [q.w, q.x, q.y, q.z],
            delay_s: p.delay,
            status: result.status.as_str().to_string(),
            failure_reason: result.failure_reason.clone(),
            final_loss: finite(result.final_loss),
            iterations: result.trace.len(),
            n_elements: result.n_elements,
            excluded_frames: result.excluded_frames.clone(),
            trace: result
                .trace
                .iter()
                .map(|e| TraceRecord {
                    w: e.w,
                    loss: finite(e.loss),
                    axis_angle_rad: arr(&e.params.axis_angle),
                    translation_m: arr(&e.params.translation),
                    delay_s: e.params.delay,
                })
                .collect(),
        }
    }

    pub fn params(&self) -> CalibrationParams {
        CalibrationParams::new(self.axis_angle_rad.into(), self.translation_m.into(), self.delay_s)
    }

    pub fn status(&self) -> Option<CalibrationStatus> {
        match self.status.as_str() {
            "Converged" => Some(CalibrationStatus::Converged),
            "MaxIterations" => Some(CalibrationStatus::MaxIterations),
            "Failed" => Some(CalibrationStatus::Failed),
            _ => None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain struct serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ReportError> {
        write(path.as_ref(), &self.to_json())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReportError> {
        let path = path.as_ref();
        let r: Self = read_json(path)?;
        if r.status().is_none() {
            return Err(ReportError::Status { path: path.to_path_buf(), status: r.status });
        }
        Ok(r)
    }
}

/// Contents of `gt.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub axis_angle_rad: [f64; 3],
    pub translation_m: [f64; 3],
    pub delay_s: f64,
    pub velocity_mps: [f64; 3],
}

impl GroundTruthFile {
    pub fn new(gt: &CalibrationParams, velocity: &Vector3<f64>) -> Self {
        Self {
            axis_angle_rad: arr(&gt.axis_angle),
            translation_m: arr(&gt.translation),
            delay_s: gt.delay,
            velocity_mps: arr(velocity),
        }
    }

    pub fn params(&self) -> CalibrationParams {
        CalibrationParams::new(self.axis_angle_rad.into(), self.translation_m.into(), self.delay_s)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain struct serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ReportError> {
        write(path.as_ref(), &self.to_json())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReportError> {
        read_json(path.as_ref())
    }
}

fn write(path: &Path, text: &str) -> Result<(), ReportError> {
    fs::write(path, text).map_err(|source| ReportError::Io { path: path.to_path_buf(), source })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ReportError> {
    let text = fs::read_to_string(path).map_err(|source| ReportError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|source| ReportError::Json { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::TraceEntry;

    fn sample() -> CalibrationResult {
        let p = CalibrationParams::new(Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.05, -0.08, -0.27), 0.1034);
        CalibrationResult {
            params: p,
            final_loss: 12.5,
            trace: vec![TraceEntry { w: 20.0, loss: f64::INFINITY, params: p }, TraceEntry { w: 1.0, loss: 12.5, params: p }],
            status: CalibrationStatus::Converged,
            failure_reason: None,
            n_elements: 40,
            excluded_frames: vec![],
        }
    }

    #[test]
    fn round_trip_preserves_bits() {
        let r = ResultFile::from_result(&sample());
        let back: ResultFile = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.params(), sample().params);
        assert_eq!(back.to_json(), r.to_json());
        assert_eq!(r.iterations, 2);
        assert_eq!(r.trace[0].loss, None);
    }

    #[test]
    fn quaternion_matches_axis_angle() {
        let r = ResultFile::from_result(&sample());
        let [w, x, y, z] = r.quaternion_wxyz;
        let aa = Vector3::from(r.axis_angle_rad);
        let half = aa.norm() / 2.0;
        assert!((w - half.cos()).abs() < 1e-12);
        let axis = aa.normalize() * half.sin();
        assert!((Vector3::new(x, y, z) - axis).norm() < 1e-12);
    }

    #[test]
    fn has_required_keys() {
        let v: serde_json::Value = serde_json::from_str(&ResultFile::from_result(&sample()).to_json()).unwrap();
        for k in ["axis_angle_rad", "translation_m", "quaternion_wxyz", "delay_s", "status", "final_loss", "iterations"] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
    }

    #[test]
    fn gt_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.json");
        let g = GroundTruthFile::new(&sample().params, &Vector3::new(0.0, 0.0, 8.0));
        g.save(&path).unwrap();
        assert_eq!(GroundTruthFile::load(&path).unwrap(), g);
    }
}
