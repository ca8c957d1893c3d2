//! Rigid transforms, pinhole intrinsics, rotation parameterizations and the
//! plain and delay-compensated projections.
//!
//! Points are mapped from the LIDAR frame into the camera frame by
//! `R p + t`, then through the pinhole matrix `K`. The delay-compensated
//! variant adds `v * delay` to the translation before applying `K`.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};

/// Camera-frame depth (meters) below which a point is not projectable.
pub const Z_MIN: f64 = 1e-3;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("matrix is not a rotation (orthonormality error {orthonormality:.3e}, det {det:.6})")]
    NotARotation { orthonormality: f64, det: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("intrinsics file {path}: {reason}")]
    IntrinsicsFile { path: String, reason: String },
}

/// Rodrigues' formula. The zero vector maps to the identity.
pub fn axis_angle_to_matrix(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(*axis_angle).into_inner()
}

/// Inverse of [`axis_angle_to_matrix`], returning a vector with norm in `[0, pi]`.
///
/// Goes through the quaternion (Shepperd's method) and `2 atan2(|v|, w)`, which
/// stays accurate near both zero and half-turn rotations.
pub fn matrix_to_axis_angle(rotation: &Matrix3<f64>) -> Vector3<f64> {
    let q = quaternion_from_matrix_unchecked(rotation);
    let v = q.imag();
    let s = v.norm();
    if s == 0.0 {
        return Vector3::zeros();
    }
    let angle = 2.0 * s.atan2(q.w);
    v * (angle / s)
}

fn quaternion_from_matrix_unchecked(rotation: &Matrix3<f64>) -> UnitQuaternion<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*rotation));
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Largest elementwise deviation of `RᵀR` from the identity.
pub fn orthonormality_error(rotation: &Matrix3<f64>) -> f64 {
    (rotation.transpose() * rotation - Matrix3::identity()).amax()
}

fn check_rotation(rotation: &Matrix3<f64>, tol: f64) -> Result<(), GeometryError> {
    let orthonormality = orthonormality_error(rotation);
    let det = rotation.determinant();
    if !orthonormality.is_finite() || orthonormality > tol || (det - 1.0).abs() > tol {
        return Err(GeometryError::NotARotation { orthonormality, det });
    }
    Ok(())
}

/// Unit quaternion of a rotation matrix with the scalar part kept non-negative.
pub fn matrix_to_quaternion(rotation: &Matrix3<f64>) -> Result<UnitQuaternion<f64>, GeometryError> {
    check_rotation(rotation, ORTHONORMAL_TOL)?;
    Ok(quaternion_from_matrix_unchecked(rotation))
}

pub fn quaternion_to_matrix(q: &UnitQuaternion<f64>) -> Matrix3<f64> {
    q.to_rotation_matrix().into_inner()
}

/// A rotation followed by a translation, mapping LIDAR-frame points into the
/// camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        check_rotation(&rotation, ORTHONORMAL_TOL)?;
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_axis_angle(axis_angle: &Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: axis_angle_to_matrix(axis_angle), translation }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }
}

/// Pinhole intrinsics without skew or distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fx.is_finite()) || !(self.fy > 0.0 && self.fy.is_finite()) {
            return bad("focal lengths must be positive and finite");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image dimensions must be positive");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) || !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("principal point must lie inside the image");
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Whether continuous pixel coordinates fall in `[0, width) x [0, height)`.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Parses `key=value` lines (`fx`, `fy`, `cx`, `cy`, `width`, `height`).
    pub fn parse(text: &str) -> Result<Self, String> {
        let (mut fx, mut fy, mut cx, mut cy, mut width, mut height) = (None, None, None, None, None, None);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", lineno + 1))?;
            let value = value.trim();
            let float = || value.parse::<f64>().map_err(|e| format!("line {}: {e}", lineno + 1));
            let int = || value.parse::<u32>().map_err(|e| format!("line {}: {e}", lineno + 1));
            match key.trim() {
                "fx" => fx = Some(float()?),
                "fy" => fy = Some(float()?),
                "cx" => cx = Some(float()?),
                "cy" => cy = Some(float()?),
                "width" => width = Some(int()?),
                "height" => height = Some(int()?),
                other => return Err(format!("line {}: unknown key '{other}'", lineno + 1)),
            }
        }
        let need = |name: &str| format!("missing key '{name}'");
        let k = Self {
            fx: fx.ok_or_else(|| need("fx"))?,
            fy: fy.ok_or_else(|| need("fy"))?,
            cx: cx.ok_or_else(|| need("cx"))?,
            cy: cy.ok_or_else(|| need("cy"))?,
            width: width.ok_or_else(|| need("width"))?,
            height: height.ok_or_else(|| need("height"))?,
        };
        k.validate().map_err(|e| e.to_string())?;
        Ok(k)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        let path = path.as_ref();
        let err = |reason: String| GeometryError::IntrinsicsFile { path: path.display().to_string(), reason };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        Self::parse(&text).map_err(err)
    }

    pub fn to_key_value(&self) -> String {
        format!(
            "fx={}\nfy={}\ncx={}\ncy={}\nwidth={}\nheight={}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }
}

/// The optimization vector: axis-angle rotation, translation and time delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationParams {
    pub axis_angle: Vector3<f64>,
    pub translation: Vector3<f64>,
    pub delay: f64,
}

impl CalibrationParams {
    /// Builds parameters, folding an axis-angle vector with norm above pi back
    /// into the canonical range.
    pub fn new(axis_angle: Vector3<f64>, translation: Vector3<f64>, delay: f64) -> Self {
        let axis_angle = if axis_angle.norm() > std::f64::consts::PI {
            matrix_to_axis_angle(&axis_angle_to_matrix(&axis_angle))
        } else {
            axis_angle
        };
        Self { axis_angle, translation, delay }
    }

    pub fn from_transform(transform: &RigidTransform, delay: f64) -> Self {
        Self::new(matrix_to_axis_angle(transform.rotation()), *transform.translation(), delay)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        axis_angle_to_matrix(&self.axis_angle)
    }

    pub fn transform(&self) -> RigidTransform {
        RigidTransform::from_axis_angle(&self.axis_angle, self.translation)
    }

    pub fn with_delay(mut self, delay: f64) -> Self {
        self.delay = delay;
        self
    }

    /// `[rx, ry, rz, tx, ty, tz, delay]`.
    pub fn to_vector(&self) -> [f64; 7] {
        let (r, t) = (self.axis_angle, self.translation);
        [r.x, r.y, r.z, t.x, t.y, t.z, self.delay]
    }

    /// Inverse of [`Self::to_vector`]; a 6-element slice leaves the delay at zero.
    pub fn from_slice(x: &[f64]) -> Self {
        assert!(x.len() == 6 || x.len() == 7, "parameter vector must have 6 or 7 entries");
        let delay = if x.len() == 7 { x[6] } else { 0.0 };
        Self::new(Vector3::new(x[0], x[1], x[2]), Vector3::new(x[3], x[4], x[5]), delay)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

#[inline]
fn project_camera_point(p_cam: &Vector3<f64>, intrinsics: &CameraIntrinsics) -> Option<Vector2<f64>> {
    let k = intrinsics;
    let px = k.fx * p_cam.x + k.cx * p_cam.z;
    let py = k.fy * p_cam.y + k.cy * p_cam.z;
    let pz = p_cam.z;
    if pz > Z_MIN {
        Some(Vector2::new(px / pz, py / pz))
    } else {
        None
    }
}

/// `(px, py, pz) = K (R p + t)`, then `(px / pz, py / pz)`. Returns `None` for
/// points at or in front of the near plane. No field-of-view clipping.
pub fn project_point(p: &Vector3<f64>, transform: &RigidTransform, intrinsics: &CameraIntrinsics) -> Option<Vector2<f64>> {
    let p_cam = transform.rotation * p + transform.translation;
    project_camera_point(&p_cam, intrinsics)
}

/// [`project_point`] with the translation replaced by `t + velocity * delay`.
pub fn project_point_delayed(
    p: &Vector3<f64>,
    transform: &RigidTransform,
    velocity: &Vector3<f64>,
    delay: f64,
    intrinsics: &CameraIntrinsics,
) -> Option<Vector2<f64>> {
    let translation = transform.translation + velocity * delay;
    let p_cam = transform.rotation * p + translation;
    project_camera_point(&p_cam, intrinsics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn unit_k() -> CameraIntrinsics {
        // principal point at the origin is allowed for width/height > 0
        CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 10, height: 10 }
    }

    #[test]
    fn zero_axis_angle_is_identity() {
        assert_eq!(axis_angle_to_matrix(&Vector3::zeros()), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let m = axis_angle_to_matrix(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((m - expected).amax() < 1e-15);
    }

    #[test]
    fn rodrigues_round_trip_fixed_vector() {
        let w = Vector3::new(0.1, 0.2, 0.3);
        let m = axis_angle_to_matrix(&w);
        assert!(orthonormality_error(&m) < 1e-12);
        assert!((matrix_to_axis_angle(&m) - w).amax() < 1e-9);
    }

    #[test]
    fn quaternion_conventions() {
        let q = matrix_to_quaternion(&Matrix3::identity()).unwrap();
        assert_eq!(q.coords, nalgebra::Vector4::new(0.0, 0.0, 0.0, 1.0));
        let half_x = axis_angle_to_matrix(&Vector3::new(PI, 0.0, 0.0));
        let q = matrix_to_quaternion(&half_x).unwrap();
        assert!(q.w.abs() < 1e-12);
        assert!((q.i.abs() - 1.0).abs() < 1e-12);
        assert!(q.j.abs() < 1e-12 && q.k.abs() < 1e-12);
    }

    #[test]
    fn non_rotation_is_rejected() {
        let m = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(matrix_to_quaternion(&m), Err(GeometryError::NotARotation { .. })));
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(reflection, Vector3::zeros()).is_err());
    }

    #[test]
    fn projection_examples() {
        let id = RigidTransform::identity();
        let p = project_point(&Vector3::new(0.0, 0.0, 5.0), &id, &unit_k()).unwrap();
        assert_eq!((p.x, p.y), (0.0, 0.0));

        let k = CameraIntrinsics::new(700.0, 700.0, 600.0, 180.0, 1242, 375).unwrap();
        let p = project_point(&Vector3::new(1.0, 0.0, 2.0), &id, &k).unwrap();
        assert!((p.x - 950.0).abs() < 1e-12 && (p.y - 180.0).abs() < 1e-12);

        assert!(project_point(&Vector3::new(0.0, 0.0, -1.0), &id, &k).is_none());
        assert!(project_point(&Vector3::new(0.0, 0.0, 0.5 * Z_MIN), &id, &k).is_none());
    }

    #[test]
    fn delayed_projection_examples() {
        let id = RigidTransform::identity();
        let p = Vector3::new(0.0, 0.0, 5.0);
        let q = project_point_delayed(&p, &id, &Vector3::new(1.0, 0.0, 0.0), 0.1, &unit_k()).unwrap();
        assert!((q.x - 0.02).abs() < 1e-15 && q.y == 0.0);
        assert!(project_point_delayed(&p, &id, &Vector3::new(0.0, 0.0, -60.0), 0.1, &unit_k()).is_none());
    }

    #[test]
    fn zero_delay_matches_plain_projection_bitwise() {
        let t = RigidTransform::from_axis_angle(&Vector3::new(0.3, -0.2, 0.1), Vector3::new(0.1, -0.2, 0.3));
        let k = CameraIntrinsics::new(500.0, 510.0, 320.0, 240.0, 640, 480).unwrap();
        for p in [Vector3::new(0.3, 0.1, 4.0), Vector3::new(-2.0, 1.0, 9.0)] {
            let a = project_point(&p, &t, &k).unwrap();
            let b = project_point_delayed(&p, &t, &Vector3::new(-3.0, 1.0, -8.0), 0.0, &k).unwrap();
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.y.to_bits(), b.y.to_bits());
        }
    }

    #[test]
    fn inverse_examples() {
        let id = RigidTransform::identity();
        assert_eq!(id.inverse(), id);
        let t = RigidTransform::new(Matrix3::identity(), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        assert_eq!(*t.inverse().translation(), Vector3::new(-1.0, -2.0, -3.0));
    }

    #[test]
    fn intrinsics_file_parsing() {
        let k = CameraIntrinsics::parse("# kitti-ish\nfx=721.5\nfy = 721.5\ncx=609.5\ncy=172.8 # pp\nwidth=1242\nheight=375\n").unwrap();
        assert_eq!(k.width, 1242);
        assert_eq!(k.cy, 172.8);
        assert_eq!(CameraIntrinsics::parse(&k.to_key_value()).unwrap(), k);
        assert!(CameraIntrinsics::parse("fx=1\nfy=1\ncx=0\ncy=0\nwidth=4").unwrap_err().contains("height"));
        assert!(CameraIntrinsics::parse("fx=-1\nfy=1\ncx=0\ncy=0\nwidth=4\nheight=4").is_err());
        assert!(CameraIntrinsics::parse("fx=1\nfy=1\ncx=9\ncy=0\nwidth=4\nheight=4").is_err());
    }

    #[test]
    fn params_renormalize_long_axis_angle() {
        let w = Vector3::new(0.0, 0.0, 1.5 * PI);
        let p = CalibrationParams::new(w, Vector3::zeros(), 0.0);
        assert!(p.axis_angle.norm() <= PI);
        assert!((p.rotation() - axis_angle_to_matrix(&w)).amax() < 1e-12);
    }
}
