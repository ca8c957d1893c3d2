//! Ego-velocity from two-view feature tracks.
//!
//! Essential matrix by the normalized 8-point solver inside RANSAC, pose by
//! cheirality voting over the four-fold decomposition, metric scale from an
//! externally supplied speed. Poses follow `x2 = R x1 + t` (older camera to
//! newer camera).

use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3, SVD};
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;

use crate::geometry::{CameraIntrinsics, Z_MIN};
use crate::semantic_io::{data_lines, parse_f64, read_text, split_fields, write_text, FeatureCorrespondences, LoadError};

#[derive(Debug, thiserror::Error)]
pub enum OdometryError {
    #[error("need at least 8 correspondences, got {0}")]
    InsufficientCorrespondences(usize),
    #[error("best model has only {inliers} inliers")]
    DegenerateConfiguration { inliers: usize },
    #[error("no pose candidate wins the cheirality vote strictly (best {best}, runner-up {runner_up})")]
    CheiralityAmbiguous { best: usize, runner_up: usize },
    #[error("median parallax {median_deg:.4} deg is too small to recover a translation direction")]
    InsufficientParallax { median_deg: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Load(#[from] LoadError),
}

/// Rank-2 essential matrix with singular values (1, 1, 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(pub Matrix3<f64>);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold_px: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iterations: 500, inlier_threshold_px: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation_direction: Vector3<f64>,
    pub inlier_count: usize,
    pub inlier_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleSource {
    SuppliedSpeed,
    SuppliedVector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityEstimate {
    pub frame_id: i64,
    /// m/s, camera frame of the newer image.
    pub v: Vector3<f64>,
    pub scale_source: ScaleSource,
    /// Seconds between the two frames; 0 when unknown.
    pub frame_dt: f64,
}

/// Below this median ray angle (degrees) the translation is not observable.
pub const MIN_PARALLAX_DEG: f64 = 0.05;

fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// `[t]× R`.
pub fn essential_from_pose(rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Matrix3<f64> {
    skew(translation) * rotation
}

/// Pixel-domain fundamental matrix `K⁻ᵀ E K⁻¹`.
pub fn fundamental_from_essential(e: &Matrix3<f64>, k: &CameraIntrinsics) -> Matrix3<f64> {
    let kinv = k.inverse_matrix();
    kinv.transpose() * e * kinv
}

/// First-order geometric distance (pixels) of a pair to the epipolar
/// constraint of `f`.
pub fn sampson_distance(f: &Matrix3<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let x1 = a.push(1.0);
    let x2 = b.push(1.0);
    let fx1 = f * x1;
    let ftx2 = f.transpose() * x2;
    let num = x2.dot(&fx1);
    let den = fx1.x * fx1.x + fx1.y * fx1.y + ftx2.x * ftx2.x + ftx2.y * ftx2.y;
    if den <= 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    num.abs() / den.sqrt()
}

/// Singular vectors and values, sorted by descending singular value.
fn sorted_svd3(m: &Matrix3<f64>) -> (Matrix3<f64>, Vector3<f64>, Matrix3<f64>) {
    let svd = SVD::new(*m, true, true);
    let (u, s, vt) = (svd.u.unwrap(), svd.singular_values, svd.v_t.unwrap());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let mut u2 = Matrix3::zeros();
    let mut vt2 = Matrix3::zeros();
    let mut s2 = Vector3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        u2.set_column(dst, &u.column(src));
        vt2.set_row(dst, &vt.row(src));
        s2[dst] = s[src];
    }
    (u2, s2, vt2)
}

/// Projects onto the essential manifold: singular values (1, 1, 0).
pub fn enforce_essential(m: &Matrix3<f64>) -> EssentialMatrix {
    let (u, _, vt) = sorted_svd3(m);
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
    EssentialMatrix(u * d * vt)
}

/// Isotropic normalization: centroid to the origin, mean distance √2.
fn hartley(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn normalized_coords(p: &Vector2<f64>, kinv: &Matrix3<f64>) -> Vector2<f64> {
    let h = kinv * p.push(1.0);
    Vector2::new(h.x / h.z, h.y / h.z)
}

/// Normalized 8-point solve on calibrated coordinates. Returns `None` for an
/// unusable sample.
pub fn eight_point(x1: &[Vector2<f64>], x2: &[Vector2<f64>]) -> Option<EssentialMatrix> {
    if x1.len() < 8 || x1.len() != x2.len() {
        return None;
    }
    let t1 = hartley(x1);
    let t2 = hartley(x2);
    // pad to a square system so the SVD exposes the null vector
    let rows = x1.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in x1.iter().zip(x2).enumerate() {
        let p = t1 * p.push(1.0);
        let q = t2 * q.push(1.0);
        let row = [q.x * p.x, q.x * p.y, q.x, q.y * p.x, q.y * p.y, q.y, p.x, p.y, 1.0];
        for (j, v) in row.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    let svd = SVD::new(a, false, true);
    let vt = svd.v_t?;
    let (imin, _) = svd.singular_values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    let e = vt.row(imin);
    let en = Matrix3::new(e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]);
    let e = t2.transpose() * en * t1;
    if !e.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(enforce_essential(&e))
}

fn inlier_mask(e: &EssentialMatrix, corr: &FeatureCorrespondences, k: &CameraIntrinsics, threshold: f64) -> Vec<bool> {
    let f = fundamental_from_essential(&e.0, k);
    corr.pairs.iter().map(|(a, b)| sampson_distance(&f, a, b) <= threshold).collect()
}

/// Sum of squared Sampson distances, each capped at the threshold.
fn truncated_cost(e: &EssentialMatrix, corr: &FeatureCorrespondences, k: &CameraIntrinsics, threshold: f64) -> f64 {
    let f = fundamental_from_essential(&e.0, k);
    let cap = threshold * threshold;
    corr.pairs.iter().map(|(a, b)| sampson_distance(&f, a, b).powi(2).min(cap)).sum()
}

/// RANSAC over 8-point samples scored by truncated Sampson cost, refit once
/// on the inliers of the best trial.
pub fn estimate_essential_ransac(
    corr: &FeatureCorrespondences,
    k: &CameraIntrinsics,
    ransac: &RansacConfig,
) -> Result<(EssentialMatrix, Vec<bool>), OdometryError> {
    let n = corr.len();
    if n < 8 {
        return Err(OdometryError::InsufficientCorrespondences(n));
    }
    if ransac.iterations == 0 || !(ransac.inlier_threshold_px > 0.0) {
        return Err(OdometryError::InvalidInput("RANSAC needs iterations > 0 and a positive threshold".into()));
    }
    let kinv = k.inverse_matrix();
    let x1: Vec<Vector2<f64>> = corr.pairs.iter().map(|(a, _)| normalized_coords(a, &kinv)).collect();
    let x2: Vec<Vector2<f64>> = corr.pairs.iter().map(|(_, b)| normalized_coords(b, &kinv)).collect();

    // samples are drawn up front so the trial set does not depend on scheduling
    let mut rng = SplitMix64::seed_from_u64(ransac.seed);
    let samples: Vec<Vec<usize>> =
        (0..ransac.iterations).map(|_| rand::seq::index::sample(&mut rng, n, 8).into_vec()).collect();
    let th = ransac.inlier_threshold_px;
    let scores: Vec<(f64, Option<EssentialMatrix>)> = samples
        .par_iter()
        .map(|idx| {
            let a: Vec<_> = idx.iter().map(|&i| x1[i]).collect();
            let b: Vec<_> = idx.iter().map(|&i| x2[i]).collect();
            match eight_point(&a, &b) {
                Some(e) => (truncated_cost(&e, corr, k, th), Some(e)),
                None => (f64::INFINITY, None),
            }
        })
        .collect();
    // first minimum wins ties
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.0 < scores[best].0 {
            best = i;
        }
    }
    let Some(model) = &scores[best].1 else {
        return Err(OdometryError::DegenerateConfiguration { inliers: 0 });
    };
    let count = inlier_mask(model, corr, k, th).iter().filter(|&&m| m).count();
    if count < 8 {
        return Err(OdometryError::DegenerateConfiguration { inliers: count });
    }
    let mask = inlier_mask(model, corr, k, th);
    let (a, b): (Vec<_>, Vec<_>) = (0..n).filter(|&i| mask[i]).map(|i| (x1[i], x2[i])).unzip();
    // one refit on the inliers of the best trial; the trial model stands if
    // the refit is degenerate or keeps fewer than 8 inliers
    let (e, mask) = match eight_point(&a, &b) {
        Some(refit) => {
            let refit_mask = inlier_mask(&refit, corr, k, th);
            if refit_mask.iter().filter(|&&m| m).count() >= 8 {
                (refit, refit_mask)
            } else {
                (*model, mask)
            }
        }
        None => (*model, mask),
    };
    Ok((e, mask))
}

/// Depths `(λ1, λ2)` with `λ2 x2 ≈ R λ1 x1 + t`, least squares.
fn triangulate_depths(r: &Matrix3<f64>, t: &Vector3<f64>, x1: &Vector3<f64>, x2: &Vector3<f64>) -> Option<(f64, f64)> {
    // [-R x1, x2] [λ1, λ2]ᵀ = t
    let a = -(r * x1);
    let b = *x2;
    let (aa, ab, bb) = (a.dot(&a), a.dot(&b), b.dot(&b));
    let det = aa * bb - ab * ab;
    if det.abs() < 1e-12 * aa * bb {
        return None;
    }
    let (at, bt) = (a.dot(t), b.dot(t));
    Some(((bb * at - ab * bt) / det, (aa * bt - ab * at) / det))
}

/// Four-fold decomposition with cheirality voting over the inliers.
pub fn decompose_essential(
    e: &EssentialMatrix,
    corr: &FeatureCorrespondences,
    inlier_mask: &[bool],
    k: &CameraIntrinsics,
) -> Result<RelativePose, OdometryError> {
    if inlier_mask.len() != corr.len() {
        return Err(OdometryError::InvalidInput("inlier mask length differs from correspondence count".into()));
    }
    let kinv = k.inverse_matrix();
    let rays: Vec<(Vector3<f64>, Vector3<f64>)> = corr
        .pairs
        .iter()
        .zip(inlier_mask)
        .filter(|(_, &m)| m)
        .map(|((a, b), _)| (kinv * a.push(1.0), kinv * b.push(1.0)))
        .collect();
    if rays.len() < 8 {
        return Err(OdometryError::DegenerateConfiguration { inliers: rays.len() });
    }
    let (mut u, _, mut vt) = sorted_svd3(&e.0);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let u3: Vector3<f64> = u.column(2).into();
    let candidates = [
        (u * w * vt, u3),
        (u * w * vt, -u3),
        (u * w.transpose() * vt, u3),
        (u * w.transpose() * vt, -u3),
    ];
    let votes: Vec<usize> = candidates
        .iter()
        .map(|(r, t)| {
            rays.iter()
                .filter(|(x1, x2)| {
                    triangulate_depths(r, t, x1, x2).is_some_and(|(l1, l2)| l1 * x1.z > Z_MIN && l2 * x2.z > Z_MIN)
                })
                .count()
        })
        .collect();
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &j| votes[j].cmp(&votes[i]).then(i.cmp(&j)));
    let (best, runner_up) = (votes[order[0]], votes[order[1]]);
    if best == runner_up {
        return Err(OdometryError::CheiralityAmbiguous { best, runner_up });
    }
    let (rotation, t) = candidates[order[0]];

    // rays agree after derotation when the baseline is negligible
    let mut parallax: Vec<f64> = rays.iter().map(|(x1, x2)| (rotation * x1).angle(x2).to_degrees()).collect();
    parallax.sort_by(f64::total_cmp);
    let median_deg = parallax[parallax.len() / 2];
    if median_deg < MIN_PARALLAX_DEG {
        return Err(OdometryError::InsufficientParallax { median_deg });
    }
    Ok(RelativePose {
        rotation,
        translation_direction: t.normalize(),
        inlier_count: rays.len(),
        inlier_ratio: rays.len() as f64 / corr.len() as f64,
    })
}

/// Metric velocity along the recovered direction.
pub fn velocity_from_pose(pose: &RelativePose, speed: f64, frame_dt: f64, frame_id: i64) -> Result<VelocityEstimate, OdometryError> {
    if !(speed >= 0.0) || !speed.is_finite() {
        return Err(OdometryError::InvalidInput(format!("speed must be finite and non-negative, got {speed}")));
    }
    if !(frame_dt > 0.0) || !frame_dt.is_finite() {
        return Err(OdometryError::InvalidInput(format!("frame_dt must be positive, got {frame_dt}")));
    }
    Ok(VelocityEstimate {
        frame_id,
        v: pose.translation_direction.normalize() * speed,
        scale_source: ScaleSource::SuppliedSpeed,
        frame_dt,
    })
}

/// RANSAC, decomposition and scaling in one call.
pub fn estimate_velocity(
    corr: &FeatureCorrespondences,
    k: &CameraIntrinsics,
    ransac: &RansacConfig,
    speed: f64,
    frame_dt: f64,
    frame_id: i64,
) -> Result<(VelocityEstimate, RelativePose), OdometryError> {
    let (e, mask) = estimate_essential_ransac(corr, k, ransac)?;
    let pose = decompose_essential(&e, corr, &mask, k)?;
    Ok((velocity_from_pose(&pose, speed, frame_dt, frame_id)?, pose))
}

pub fn parse_velocity_csv(text: &str, path: &Path) -> Result<Vec<VelocityEstimate>, LoadError> {
    let mut out = Vec::new();
    for (line, content) in data_lines(text) {
        let perr = |message: String| LoadError::Parse { path: path.to_path_buf(), line, message };
        let f = split_fields(content, 4).map_err(perr)?;
        let frame_id: i64 = f[0].parse().map_err(|_| perr(format!("invalid frame id '{}'", f[0])))?;
        let mut v = Vector3::zeros();
        for i in 0..3 {
            v[i] = parse_f64(f[i + 1]).map_err(perr)?;
        }
        out.push(VelocityEstimate { frame_id, v, scale_source: ScaleSource::SuppliedVector, frame_dt: 0.0 });
    }
    Ok(out)
}

pub fn load_velocity_csv(path: impl AsRef<Path>) -> Result<Vec<VelocityEstimate>, LoadError> {
    let path = path.as_ref();
    parse_velocity_csv(&read_text(path)?, path)
}

pub fn velocity_to_csv(estimates: &[VelocityEstimate]) -> String {
    let mut out = String::from("# frame_id,vx,vy,vz\n");
    for e in estimates {
        out.push_str(&format!("{},{},{},{}\n", e.frame_id, e.v.x, e.v.y, e.v.z));
    }
    out
}

pub fn save_velocity_csv(estimates: &[VelocityEstimate], path: impl AsRef<Path>) -> Result<(), LoadError> {
    write_text(path.as_ref(), &velocity_to_csv(estimates))
}
