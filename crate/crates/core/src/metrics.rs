//! Calibration error metrics: QAD, AEAD, ATD and delay error.
//!
//! Computation is in SI; results are reported in degrees, centimeters and
//! milliseconds.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{matrix_to_quaternion, CalibrationParams, GeometryError};

/// Pitch within this many degrees of ±90° raises the gimbal-lock flag.
pub const GIMBAL_MARGIN_DEG: f64 = 0.5;

/// Quaternion angle difference in degrees, in [0, 180].
pub fn qad(r_gt: &Matrix3<f64>, r_est: &Matrix3<f64>) -> Result<f64, GeometryError> {
    let p = matrix_to_quaternion(r_gt)?;
    let q = matrix_to_quaternion(r_est)?;
    let dot = p.coords.dot(&q.coords).abs().clamp(-1.0, 1.0);
    Ok((2.0 * dot.acos()).to_degrees())
}

/// Builds `R = Rx(roll) · Ry(pitch) · Rz(yaw)` (intrinsic x-y-z).
pub fn euler_xyz_to_matrix(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    rx * ry * rz
}

/// Intrinsic x-y-z angles `(roll, pitch, yaw)` in radians, inverse of
/// [`euler_xyz_to_matrix`] for |pitch| < 90°.
pub fn matrix_to_euler_xyz(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let pitch = r[(0, 2)].clamp(-1.0, 1.0).asin();
    if 1.0 - r[(0, 2)].abs() < 1e-12 {
        // gimbal lock: fold everything into roll
        let roll = r[(2, 1)].atan2(r[(1, 1)]);
        return (roll, pitch, 0.0);
    }
    let roll = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let yaw = (-r[(0, 1)]).atan2(r[(0, 0)]);
    (roll, pitch, yaw)
}

fn wrapped_abs_diff_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).to_degrees().rem_euclid(360.0);
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AeadValue {
    pub degrees: f64,
    pub gimbal_lock: bool,
}

/// Average absolute Euler angle difference in degrees.
pub fn aead(r_gt: &Matrix3<f64>, r_est: &Matrix3<f64>) -> Result<AeadValue, GeometryError> {
    // validates both inputs
    matrix_to_quaternion(r_gt)?;
    matrix_to_quaternion(r_est)?;
    let a = matrix_to_euler_xyz(r_gt);
    let b = matrix_to_euler_xyz(r_est);
    let near_lock = |p: f64| 90.0 - p.to_degrees().abs() <= GIMBAL_MARGIN_DEG;
    let degrees = (wrapped_abs_diff_deg(a.0, b.0) + wrapped_abs_diff_deg(a.1, b.1) + wrapped_abs_diff_deg(a.2, b.2)) / 3.0;
    Ok(AeadValue { degrees, gimbal_lock: near_lock(a.1) || near_lock(b.1) })
}

/// Average absolute per-axis translation difference in centimeters.
pub fn atd(t_gt: &Vector3<f64>, t_est: &Vector3<f64>) -> f64 {
    (t_gt - t_est).abs().sum() / 3.0 * 100.0
}

/// Absolute delay difference in milliseconds.
pub fn delay_error(delta_gt: f64, delta_est: f64) -> f64 {
    (delta_gt - delta_est).abs() * 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationError {
    pub qad_deg: f64,
    pub aead_deg: f64,
    pub atd_cm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub delay_error_ms: Option<f64>,
}

impl CalibrationError {
    /// Errors of `est` against `gt`; the delay term is included when `with_delay`.
    pub fn between(gt: &CalibrationParams, est: &CalibrationParams, with_delay: bool) -> Result<Self, GeometryError> {
        let (rg, re) = (gt.rotation(), est.rotation());
        Ok(Self {
            qad_deg: qad(&rg, &re)?,
            aead_deg: aead(&rg, &re)?.degrees,
            atd_cm: atd(&gt.translation, &est.translation),
            delay_error_ms: with_delay.then(|| delay_error(gt.delay, est.delay)),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }

    pub fn to_key_value(&self) -> String {
        let mut s = format!("qad_deg={}\naead_deg={}\natd_cm={}\n", self.qad_deg, self.aead_deg, self.atd_cm);
        if let Some(d) = self.delay_error_ms {
            s.push_str(&format!("delay_error_ms={d}\n"));
        }
        s
    }
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mean: CalibrationError,
    pub median: CalibrationError,
    pub count: usize,
}

pub fn summarize(errors: &[CalibrationError]) -> Option<ErrorSummary> {
    if errors.is_empty() {
        return None;
    }
    let col = |f: fn(&CalibrationError) -> f64| errors.iter().map(f).collect::<Vec<_>>();
    let delays: Vec<f64> = errors.iter().filter_map(|e| e.delay_error_ms).collect();
    let with_delay = delays.len() == errors.len();
    let build = |agg: fn(&[f64]) -> Option<f64>| CalibrationError {
        qad_deg: agg(&col(|e| e.qad_deg)).unwrap(),
        aead_deg: agg(&col(|e| e.aead_deg)).unwrap(),
        atd_cm: agg(&col(|e| e.atd_cm)).unwrap(),
        delay_error_ms: if with_delay { agg(&delays) } else { None },
    };
    Some(ErrorSummary { mean: build(mean), median: build(median), count: errors.len() })
}
