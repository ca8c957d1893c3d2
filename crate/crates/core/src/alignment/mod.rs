//! Semantic alignment losses between a projected point cloud and a class mask.
//!
//! - point-to-pixel: every projected point against its nearest class pixel,
//!   looked up in a precomputed [`NearestPixelIndex`]
//! - pixel-to-point: a frozen down-sample of class pixels against the nearest
//!   projected point, found with a [`KdTree2`] rebuilt per evaluation
//! - bidirectional: `L_p2i + w * (n_p / n_i) * L_i2p`
//!
//! Pixel `(u, v)` sits at the integer coordinates `(u, v)`. The point-to-pixel
//! residual of a projected point is the squared distance from its continuous
//! coordinates to the class pixel the index returns for its rounded cell, so a
//! point inside the class region still pays its sub-pixel offset. This keeps
//! the loss continuous where points cross the region boundary.

mod feature_transform;
mod kdtree;

pub use feature_transform::{build_nearest_pixel_index, NearestPixelIndex};
pub use kdtree::KdTree2;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

use crate::geometry::{project_point_delayed, CalibrationParams, CameraIntrinsics};
use crate::semantic_io::{SemanticMask, SemanticPointCloud};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AlignmentError {
    #[error("class {class_id} absent from the mask")]
    ClassAbsent { class_id: u32 },
    #[error("no projected points inside the image")]
    EmptyProjection,
    #[error("sampling rate {0} outside (0, 1]")]
    InvalidRate(f64),
}

/// A projected point in continuous image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
    pub source_index: usize,
}

/// Projected points that landed inside the image, in input order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProjectedSet {
    pub pixels: Vec<PixelPoint>,
}

impl ProjectedSet {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Down-sampled class pixels, frozen for an optimization run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledPixels {
    pub pixels: Vec<(u32, u32)>,
    pub class_id: u32,
    pub seed: u64,
}

impl SampledPixels {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Projects every point with the delay-compensated model and keeps those
/// inside `[0, width) x [0, height)`.
pub fn project_cloud(
    cloud: &SemanticPointCloud,
    params: &CalibrationParams,
    velocity: &Vector3<f64>,
    intrinsics: &CameraIntrinsics,
) -> ProjectedSet {
    let transform = params.transform();
    let pixels = cloud
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let q = project_point_delayed(p, &transform, velocity, params.delay, intrinsics)?;
            intrinsics.contains(q.x, q.y).then_some(PixelPoint { u: q.x, v: q.y, source_index: i })
        })
        .collect();
    ProjectedSet { pixels }
}

/// Point-to-pixel residual of a single projected point.
#[inline]
pub fn point_to_pixel_residual(p: &PixelPoint, index: &NearestPixelIndex) -> f64 {
    let (cu, cv) = index.cell_of(p.u, p.v);
    let (nu, nv) = index.nearest(cu, cv);
    (p.u - nu as f64).powi(2) + (p.v - nv as f64).powi(2)
}

/// Sum of squared distances from projected points to their nearest class pixel.
pub fn loss_point_to_pixel(projected: &ProjectedSet, index: &NearestPixelIndex) -> Result<f64, AlignmentError> {
    if projected.is_empty() {
        return Err(AlignmentError::EmptyProjection);
    }
    Ok(projected.pixels.iter().map(|p| point_to_pixel_residual(p, index)).sum())
}

/// Uniform sample of class pixels without replacement. The same inputs always
/// give the same sample, listed in row-major order.
pub fn downsample_pixels(mask: &SemanticMask, class_id: u32, rate: f64, seed: u64) -> Result<SampledPixels, AlignmentError> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(AlignmentError::InvalidRate(rate));
    }
    let w = mask.width;
    let all: Vec<(u32, u32)> = mask
        .classes
        .iter()
        .enumerate()
        .filter(|(_, &c)| c as u32 == class_id)
        .map(|(i, _)| ((i as u32) % w, (i as u32) / w))
        .collect();
    if all.is_empty() {
        return Err(AlignmentError::ClassAbsent { class_id });
    }
    let n = ((rate * all.len() as f64).round() as usize).clamp(1, all.len());
    let pixels = if n == all.len() {
        all
    } else {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, all.len(), n).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| all[i]).collect()
    };
    Ok(SampledPixels { pixels, class_id, seed })
}

/// Sum of squared distances from sampled pixels to their nearest projected point.
pub fn loss_pixel_to_point(sampled: &SampledPixels, projected: &ProjectedSet) -> Result<f64, AlignmentError> {
    if projected.is_empty() {
        return Err(AlignmentError::EmptyProjection);
    }
    let tree = KdTree2::build(projected.pixels.iter().map(|p| ([p.u, p.v], p.source_index)));
    Ok(sampled
        .pixels
        .iter()
        .map(|&(u, v)| tree.nearest([u as f64, v as f64]).map_or(0.0, |(_, d2)| d2))
        .sum())
}

/// The two directional losses with their element counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub point_to_pixel: f64,
    pub pixel_to_point: f64,
    pub n_projected: usize,
    pub n_sampled: usize,
}

impl LossTerms {
    pub fn compute(projected: &ProjectedSet, index: &NearestPixelIndex, sampled: &SampledPixels) -> Result<Self, AlignmentError> {
        Ok(Self {
            point_to_pixel: loss_point_to_pixel(projected, index)?,
            pixel_to_point: loss_pixel_to_point(sampled, projected)?,
            n_projected: projected.len(),
            n_sampled: sampled.len(),
        })
    }

    /// `L_p2i + w * (n_p / n_i) * L_i2p`.
    pub fn combine(&self, w: f64) -> f64 {
        if w == 0.0 {
            return self.point_to_pixel;
        }
        let ratio = self.n_projected as f64 / self.n_sampled.max(1) as f64;
        self.point_to_pixel + w * ratio * self.pixel_to_point
    }
}

pub fn bidirectional_loss(
    projected: &ProjectedSet,
    index: &NearestPixelIndex,
    sampled: &SampledPixels,
    w: f64,
) -> Result<f64, AlignmentError> {
    if w == 0.0 {
        return loss_point_to_pixel(projected, index);
    }
    Ok(LossTerms::compute(projected, index, sampled)?.combine(w))
}
