//! Synthetic ground-truth scenes.
//!
//! Car-like boxes are placed in the camera frame at image time. Their surface
//! points are mapped back into the LIDAR frame through the ground-truth
//! extrinsic, delay and velocity, so that the delay-compensated projection of
//! the cloud with the ground-truth parameters lands on the mask. The mask is
//! rasterized from a dense over-sampling of each box: the convex footprint of
//! the projected samples, grown by half a pixel so that every point inside the
//! footprint rounds onto a class pixel.
//!
//! All randomness comes from a seeded SplitMix64 generator.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::geometry::{
    axis_angle_to_matrix, project_point, project_point_delayed, CalibrationParams, CameraIntrinsics,
    RigidTransform, Z_MIN,
};
use crate::metrics::euler_xyz_to_matrix;
use crate::semantic_io::{FeatureCorrespondences, SemanticMask, SemanticPointCloud};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
    #[error("no cluster projects into the image")]
    EmptyScene,
    #[error("only {0} points are visible in both views (need at least 8)")]
    TooFewVisible(usize),
}

/// Scene generation parameters. Lengths in meters, camera frame (x right,
/// y down, z forward).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub n_clusters: usize,
    pub points_per_cluster: usize,
    /// Share of cluster points cast through the box outline rather than its
    /// interior, standing in for scan lines that end at object silhouettes.
    pub edge_fraction: f64,
    /// Ground points labelled with `background_class`.
    pub background_points: usize,
    pub length_range: (f64, f64),
    pub width_range: (f64, f64),
    pub height_range: (f64, f64),
    pub depth_range: (f64, f64),
    pub lateral_range: (f64, f64),
    /// Camera-frame y of the box centers.
    pub vertical_range: (f64, f64),
    pub gt_transform: RigidTransform,
    pub gt_delay: f64,
    pub gt_velocity: Vector3<f64>,
    pub intrinsics: CameraIntrinsics,
    pub cloud_class: u32,
    pub mask_class: u8,
    pub background_class: u8,
    /// Per-point probability of swapping a cloud label between object and background.
    pub label_flip_rate: f64,
    /// Dense samples per cloud point used for mask rasterization.
    pub oversample: usize,
    pub seed: u64,
}

/// LIDAR-to-camera rotation of a KITTI-style rig (x forward, y left, z up on
/// the LIDAR side) with a small mounting offset.
pub fn kitti_like_extrinsic() -> RigidTransform {
    let axes = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    let mounting = axis_angle_to_matrix(&Vector3::new(0.004, -0.012, 0.007));
    RigidTransform::new(axes * mounting, Vector3::new(0.06, -0.08, -0.27)).expect("valid rotation")
}

pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(721.5377, 721.5377, 609.5593, 172.854, 1242, 375).expect("valid intrinsics")
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_clusters: 5,
            points_per_cluster: 200,
            edge_fraction: 0.1,
            background_points: 200,
            length_range: (3.6, 4.8),
            width_range: (1.6, 1.9),
            height_range: (1.4, 1.7),
            depth_range: (8.0, 30.0),
            lateral_range: (-8.0, 8.0),
            vertical_range: (0.3, 1.2),
            gt_transform: kitti_like_extrinsic(),
            gt_delay: 0.0,
            gt_velocity: Vector3::zeros(),
            intrinsics: default_intrinsics(),
            cloud_class: 10,
            mask_class: 13,
            background_class: 0,
            label_flip_rate: 0.0,
            oversample: 20,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        let range_ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        if self.n_clusters == 0 {
            return bad("n_clusters must be at least 1");
        }
        if self.points_per_cluster < 10 {
            return bad("points_per_cluster must be at least 10");
        }
        for (name, r) in [
            ("length_range", self.length_range),
            ("width_range", self.width_range),
            ("height_range", self.height_range),
            ("depth_range", self.depth_range),
            ("lateral_range", self.lateral_range),
            ("vertical_range", self.vertical_range),
        ] {
            if !range_ok(r) {
                return Err(SynthError::InvalidConfig(format!("{name} must be an ordered finite pair")));
            }
        }
        if self.length_range.0 <= 0.0 || self.width_range.0 <= 0.0 || self.height_range.0 <= 0.0 {
            return bad("box sizes must be positive");
        }
        if self.depth_range.0 <= Z_MIN {
            return bad("depth range must lie beyond the near plane");
        }
        if self.mask_class == self.background_class || self.cloud_class == self.background_class as u32 {
            return bad("object and background classes must differ");
        }
        if !(0.0..=1.0).contains(&self.edge_fraction) {
            return bad("edge_fraction must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.label_flip_rate) {
            return bad("label_flip_rate must be in [0, 1]");
        }
        if self.oversample == 0 {
            return bad("oversample must be positive");
        }
        if !self.gt_delay.is_finite() || !self.gt_velocity.iter().all(|v| v.is_finite()) {
            return bad("delay and velocity must be finite");
        }
        self.intrinsics.validate().map_err(|e| SynthError::InvalidConfig(e.to_string()))
    }

    pub fn gt_params(&self) -> CalibrationParams {
        CalibrationParams::from_transform(&self.gt_transform, self.gt_delay)
    }
}

/// A generated frame with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub cloud: SemanticPointCloud,
    pub mask: SemanticMask,
    pub velocity: Vector3<f64>,
    pub gt: CalibrationParams,
    pub intrinsics: CameraIntrinsics,
    /// Box centers in the camera frame at image time.
    pub cluster_centers: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, Copy)]
struct CarBox {
    center: Vector3<f64>,
    half: Vector3<f64>,
    yaw: f64,
}

impl CarBox {
    fn axes(&self) -> Matrix3<f64> {
        axis_angle_to_matrix(&Vector3::new(0.0, self.yaw, 0.0))
    }

    fn corners(&self) -> Vec<Vector3<f64>> {
        let r = self.axes();
        let mut out = Vec::with_capacity(8);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let local = Vector3::new(sx * self.half.x, sy * self.half.y, sz * self.half.z);
                    out.push(self.center + r * local);
                }
            }
        }
        out
    }

    /// First intersection of the camera ray `t * dir` (t > 0) with the box.
    fn ray_hit(&self, dir: &Vector3<f64>) -> Option<Vector3<f64>> {
        let axes = self.axes();
        let o = axes.transpose() * (-self.center);
        let d = axes.transpose() * dir;
        let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..3 {
            if d[i].abs() < 1e-15 {
                if o[i].abs() > self.half[i] {
                    return None;
                }
                continue;
            }
            let a = (-self.half[i] - o[i]) / d[i];
            let b = (self.half[i] - o[i]) / d[i];
            near = near.max(a.min(b));
            far = far.min(a.max(b));
        }
        (near <= far && near > 0.0).then(|| dir * near)
    }

    /// Image outline of the box seen from the camera origin.
    fn silhouette(&self, k: &CameraIntrinsics) -> Vec<Vector2<f64>> {
        let id = RigidTransform::identity();
        convex_hull(&self.corners().iter().filter_map(|c| project_point(c, &id, k)).collect::<Vec<_>>())
    }

    /// `n` visible surface points, scan-pattern style: rays through a square
    /// pixel lattice with random phase clipped to the silhouette, plus a share
    /// `edge_fraction` through random points of the outline itself. The lattice
    /// spacing is the largest that yields enough hits; surplus hits are dropped
    /// at random.
    fn sample_visible(&self, hull: &[Vector2<f64>], k: &CameraIntrinsics, n: usize, edge_fraction: f64, rng: &mut SplitMix64) -> Vec<Vector3<f64>> {
        let kinv = k.inverse_matrix();
        let hit = |q: Vector2<f64>| self.ray_hit(&(kinv * q.push(1.0)));
        let n_edge = (edge_fraction * n as f64).round() as usize;
        let n_grid = n - n_edge;

        let centroid = hull.iter().fold(Vector2::zeros(), |a, p| a + p) / hull.len() as f64;
        let perimeter: f64 = (0..hull.len()).map(|i| (hull[(i + 1) % hull.len()] - hull[i]).norm()).sum();
        let mut out = Vec::with_capacity(n);
        while out.len() < n_edge {
            let mut pick = rng.random::<f64>() * perimeter;
            let mut q = hull[0];
            for i in 0..hull.len() {
                let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
                let len = (b - a).norm();
                if pick <= len {
                    q = a + (b - a) * (pick / len);
                    break;
                }
                pick -= len;
            }
            // nudge inside so the ray grazes the box rather than missing it
            if let Some(p) = hit(q + (centroid - q).normalize() * 1e-3) {
                out.push(p);
            }
        }
        if n_grid == 0 {
            return out;
        }

        let (mut lo, mut hi) = (hull[0], hull[0]);
        for p in hull {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let phase = Vector2::new(rng.random::<f64>(), rng.random::<f64>());
        let lattice = |s: f64| -> Vec<Vector3<f64>> {
            let mut pts = Vec::new();
            let (i0, i1) = (((lo.x / s) - phase.x).floor() as i64, ((hi.x / s) - phase.x).ceil() as i64);
            let (j0, j1) = (((lo.y / s) - phase.y).floor() as i64, ((hi.y / s) - phase.y).ceil() as i64);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    let q = Vector2::new((i as f64 + phase.x) * s, (j as f64 + phase.y) * s);
                    if point_in_convex(hull, &q) {
                        pts.extend(hit(q));
                    }
                }
            }
            pts
        };
        let area = 0.5
            * (0..hull.len())
                .map(|i| {
                    let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
                    a.x * b.y - a.y * b.x
                })
                .sum::<f64>()
                .abs();
        let guess = (area / n_grid as f64).sqrt().max(1e-6);
        let (mut s_lo, mut s_hi) = (0.5 * guess, 2.0 * guess);
        while lattice(s_lo).len() < n_grid {
            s_hi = s_lo;
            s_lo *= 0.5;
        }
        for _ in 0..30 {
            let mid = 0.5 * (s_lo + s_hi);
            if lattice(mid).len() >= n_grid {
                s_lo = mid;
            } else {
                s_hi = mid;
            }
        }
        let mut grid = lattice(s_lo);
        let keep = rand::seq::index::sample(rng, grid.len(), n_grid).into_vec();
        let mut keep_sorted = keep;
        keep_sorted.sort_unstable();
        out.extend(keep_sorted.into_iter().map(|i| std::mem::take(&mut grid[i])));
        out
    }

    /// Uniform, area-weighted sample on the box surface.
    fn sample_surface(&self, rng: &mut SplitMix64) -> Vector3<f64> {
        let h = self.half;
        // faces normal to x, y, z: area 4*h_j*h_k each, two of each
        let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
        let total: f64 = areas.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut axis = 2;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                axis = i;
                break;
            }
            pick -= a;
        }
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let mut local = Vector3::new(
            rng.random_range(-h.x..=h.x),
            rng.random_range(-h.y..=h.y),
            rng.random_range(-h.z..=h.z),
        );
        local[axis] = side * h[axis];
        self.center + self.axes() * local
    }
}

fn uniform(rng: &mut SplitMix64, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

fn quantize(p: Vector3<f64>) -> Vector3<f64> {
    p.map(|c| c as f32 as f64)
}

/// Andrew's monotone chain; counter-clockwise in (u, v) image coordinates,
/// no collinear points.
pub(crate) fn convex_hull(points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut pts: Vec<Vector2<f64>> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>| (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vector2<f64>>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for p in iter {
            while hull.len() >= start + 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop();
    }
    hull
}

fn point_in_convex(hull: &[Vector2<f64>], q: &Vector2<f64>) -> bool {
    let n = hull.len();
    n >= 3
        && (0..n).all(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % n]);
            (b.x - a.x) * (q.y - a.y) - (b.y - a.y) * (q.x - a.x) >= 0.0
        })
}

/// Marks every pixel whose unit square intersects the convex polygon.
fn rasterize_hull(hull: &[Vector2<f64>], mask: &mut SemanticMask, class: u8) {
    if hull.is_empty() {
        return;
    }
    let (w, h) = (mask.width as f64, mask.height as f64);
    let (mut lo, mut hi) = (hull[0], hull[0]);
    for p in hull {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    // pixel centers within half a pixel of the bounding box
    let u0 = (lo.x - 0.5).ceil().max(0.0);
    let u1 = (hi.x + 0.5).floor().min(w - 1.0);
    let v0 = (lo.y - 0.5).ceil().max(0.0);
    let v1 = (hi.y + 0.5).floor().min(h - 1.0);
    if u0 > u1 || v0 > v1 {
        return;
    }
    let n = hull.len();
    for v in v0 as u32..=v1 as u32 {
        for u in u0 as u32..=u1 as u32 {
            let c = Vector2::new(u as f64, v as f64);
            let inside = n < 3
                || (0..n).all(|i| {
                    let a = hull[i];
                    let e = hull[(i + 1) % n] - a;
                    let cross = e.x * (c.y - a.y) - e.y * (c.x - a.x);
                    cross >= -0.5 * (e.x.abs() + e.y.abs())
                });
            if inside {
                mask.set(u, v, class);
            }
        }
    }
}

pub fn generate_scene(config: &SceneConfig) -> Result<SceneBundle, SynthError> {
    config.validate()?;
    let mut rng = SplitMix64::seed_from_u64(config.seed);
    let k = &config.intrinsics;
    let gt = config.gt_params();
    let transform = config.gt_transform;
    let shift = config.gt_velocity * config.gt_delay;
    let to_lidar = |c: &Vector3<f64>| transform.rotation().transpose() * (c - transform.translation() - shift);

    let mut boxes = Vec::new();
    for _ in 0..config.n_clusters {
        for _attempt in 0..100 {
            let b = CarBox {
                center: Vector3::new(
                    uniform(&mut rng, config.lateral_range),
                    uniform(&mut rng, config.vertical_range),
                    uniform(&mut rng, config.depth_range),
                ),
                half: Vector3::new(
                    0.5 * uniform(&mut rng, config.width_range),
                    0.5 * uniform(&mut rng, config.height_range),
                    0.5 * uniform(&mut rng, config.length_range),
                ),
                yaw: rng.random_range(0.0..std::f64::consts::TAU),
            };
            let in_front = b.corners().iter().all(|c| c.z > 1.0);
            let center_px = project_point(&b.center, &RigidTransform::identity(), k);
            let visible = center_px.is_some_and(|q| {
                let (mu, mv) = (0.05 * k.width as f64, 0.05 * k.height as f64);
                q.x > mu && q.y > mv && q.x < k.width as f64 - mu && q.y < k.height as f64 - mv
            });
            if in_front && visible {
                boxes.push(b);
                break;
            }
        }
    }
    if boxes.is_empty() {
        return Err(SynthError::EmptyScene);
    }

    let mut mask = SemanticMask::filled(k.width, k.height, config.background_class);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for b in &boxes {
        let hull = b.silhouette(k);
        for p in b.sample_visible(&hull, k, config.points_per_cluster, config.edge_fraction, &mut rng) {
            points.push(quantize(to_lidar(&p)));
            labels.push(config.cloud_class);
        }
        // dense samples through the delay-compensated projection
        let dense_n = config.points_per_cluster * config.oversample;
        let mut footprint: Vec<Vector2<f64>> = Vec::with_capacity(dense_n + 8);
        let corners = b.corners();
        let dense = corners.iter().copied().chain((0..dense_n).map(|_| b.sample_surface(&mut rng)));
        for c in dense {
            let p = to_lidar(&c);
            if let Some(q) = project_point_delayed(&p, &transform, &config.gt_velocity, config.gt_delay, k) {
                footprint.push(q);
            }
        }
        rasterize_hull(&convex_hull(&footprint), &mut mask, config.mask_class);
    }
    if mask.count_class(config.mask_class as u32) == 0 {
        return Err(SynthError::EmptyScene);
    }

    // ground plane clutter, 1.65 m below the camera
    for _ in 0..config.background_points {
        let c = Vector3::new(
            uniform(&mut rng, (config.lateral_range.0 - 4.0, config.lateral_range.1 + 4.0)),
            1.65,
            uniform(&mut rng, config.depth_range),
        );
        points.push(quantize(to_lidar(&c)));
        labels.push(config.background_class as u32);
    }

    if config.label_flip_rate > 0.0 {
        for l in labels.iter_mut() {
            if rng.random::<f64>() < config.label_flip_rate {
                *l = if *l == config.cloud_class { config.background_class as u32 } else { config.cloud_class };
            }
        }
    }

    Ok(SceneBundle {
        cloud: SemanticPointCloud::new(points, labels, 0),
        mask,
        velocity: config.gt_velocity,
        gt,
        intrinsics: *k,
        cluster_centers: boxes.iter().map(|b| b.center).collect(),
    })
}

/// Adds uniform noise to translation (per axis, meters) and rotation (per
/// intrinsic x-y-z Euler axis, degrees, composed on the camera side). The
/// delay is left untouched.
pub fn perturb_params(gt: &CalibrationParams, trans_range: f64, rot_range_deg: f64, seed: u64) -> CalibrationParams {
    assert!(trans_range >= 0.0 && rot_range_deg >= 0.0, "noise ranges must be non-negative");
    if trans_range == 0.0 && rot_range_deg == 0.0 {
        return *gt;
    }
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut sym = |r: f64| if r == 0.0 { 0.0 } else { rng.random_range(-r..=r) };
    let dt = Vector3::new(sym(trans_range), sym(trans_range), sym(trans_range));
    let r = rot_range_deg.to_radians();
    let noise = euler_xyz_to_matrix(sym(r), sym(r), sym(r));
    let rotation = noise * gt.rotation();
    CalibrationParams::new(crate::geometry::matrix_to_axis_angle(&rotation), gt.translation + dt, gt.delay)
}

/// Two-view setup for odometry checks. `pose_delta` maps camera-1 coordinates
/// to camera-2 coordinates (`x2 = R x1 + t`).
#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewConfig {
    pub intrinsics: CameraIntrinsics,
    pub depth_range: (f64, f64),
    pub pose_delta: RigidTransform,
    pub n_points: usize,
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl TwoViewConfig {
    pub fn from_scene(scene: &SceneConfig, pose_delta: RigidTransform) -> Self {
        Self {
            intrinsics: scene.intrinsics,
            depth_range: scene.depth_range,
            pose_delta,
            n_points: 100,
            outlier_fraction: 0.0,
            seed: scene.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewScene {
    pub correspondences: FeatureCorrespondences,
    pub gt_pose: RigidTransform,
    pub outliers: Vec<bool>,
    pub points: Vec<Vector3<f64>>,
}

/// Pixel-space Sampson distance of a correspondence under the pose `x2 = R x1 + t`.
pub fn pose_sampson_distance(pose: &RigidTransform, k: &CameraIntrinsics, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let t = pose.translation();
    let tx = Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
    let e = tx * pose.rotation();
    let kinv = k.inverse_matrix();
    let f = kinv.transpose() * e * kinv;
    crate::odometry::sampson_distance(&f, a, b)
}

pub fn make_two_view_correspondences(config: &TwoViewConfig) -> Result<TwoViewScene, SynthError> {
    if config.pose_delta.translation().norm() == 0.0 {
        return Err(SynthError::InvalidConfig("pose_delta needs a nonzero translation".into()));
    }
    if !(0.0..1.0).contains(&config.outlier_fraction) {
        return Err(SynthError::InvalidConfig("outlier_fraction must be in [0, 1)".into()));
    }
    let k = &config.intrinsics;
    let kinv = k.inverse_matrix();
    let mut rng = SplitMix64::seed_from_u64(config.seed);
    let mut pairs = Vec::with_capacity(config.n_points);
    let mut points = Vec::with_capacity(config.n_points);
    let id = RigidTransform::identity();
    for _ in 0..config.n_points * 100 {
        if pairs.len() == config.n_points {
            break;
        }
        let pix = Vector3::new(
            rng.random_range(0.0..k.width as f64),
            rng.random_range(0.0..k.height as f64),
            1.0,
        );
        let depth = uniform(&mut rng, config.depth_range);
        let x1 = kinv * pix * depth;
        let Some(a) = project_point(&x1, &id, k) else { continue };
        let Some(b) = project_point(&x1, &config.pose_delta, k) else { continue };
        if !k.contains(b.x, b.y) {
            continue;
        }
        pairs.push((a, b));
        points.push(x1);
    }
    if pairs.len() < 8 {
        return Err(SynthError::TooFewVisible(pairs.len()));
    }
    let n = pairs.len();
    let n_out = (config.outlier_fraction * n as f64).round() as usize;
    let mut outliers = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, n_out) {
        outliers[i] = true;
        loop {
            let b = Vector2::new(rng.random_range(0.0..k.width as f64), rng.random_range(0.0..k.height as f64));
            if pose_sampson_distance(&config.pose_delta, k, &pairs[i].0, &b) > 5.0 {
                pairs[i].1 = b;
                break;
            }
        }
    }
    Ok(TwoViewScene {
        correspondences: FeatureCorrespondences { pairs },
        gt_pose: config.pose_delta,
        outliers,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{build_nearest_pixel_index, project_cloud};
    use crate::semantic_io::filter_by_class;

    #[test]
    fn same_seed_same_scene() {
        let c = SceneConfig { seed: 11, ..Default::default() };
        assert_eq!(generate_scene(&c).unwrap(), generate_scene(&c).unwrap());
        let d = SceneConfig { seed: 12, ..Default::default() };
        assert_ne!(generate_scene(&c).unwrap().cloud, generate_scene(&d).unwrap().cloud);
    }

    #[test]
    fn gt_projection_lands_on_mask() {
        for seed in 0..5 {
            for (delay, vel) in [(0.0, Vector3::zeros()), (0.1, Vector3::new(0.0, 0.0, 8.0)), (0.3, Vector3::new(1.0, 0.0, -8.0))] {
                let c = SceneConfig { seed, gt_delay: delay, gt_velocity: vel, ..Default::default() };
                let s = generate_scene(&c).unwrap();
                let cloud = filter_by_class(&s.cloud, c.cloud_class);
                let idx = build_nearest_pixel_index(&s.mask, c.mask_class as u32).unwrap();
                let proj = project_cloud(&cloud, &s.gt, &s.velocity, &s.intrinsics);
                assert!(proj.len() > cloud.len() / 2);
                for p in &proj.pixels {
                    let (u, v) = idx.cell_of(p.u, p.v);
                    assert!(idx.is_class(u, v), "seed {seed}: point {p:?} off the mask");
                }
            }
        }
    }

    #[test]
    fn cluster_centroids_project_inside_footprint() {
        let c = SceneConfig { seed: 3, ..Default::default() };
        let s = generate_scene(&c).unwrap();
        let n = c.points_per_cluster;
        let car: Vec<_> = s.cloud.points.iter().zip(&s.cloud.labels).filter(|(_, &l)| l == c.cloud_class).map(|(p, _)| *p).collect();
        assert_eq!(car.len(), s.cluster_centers.len() * n);
        for block in car.chunks(n) {
            let centroid = block.iter().sum::<Vector3<f64>>() / n as f64;
            let q = project_point(&centroid, &s.gt.transform(), &s.intrinsics).unwrap();
            assert_eq!(s.mask.get(q.x.round() as u32, q.y.round() as u32), c.mask_class);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let c = SceneConfig { n_clusters: 0, ..Default::default() };
        assert!(matches!(generate_scene(&c), Err(SynthError::InvalidConfig(_))));
        let c = SceneConfig { points_per_cluster: 5, ..Default::default() };
        assert!(matches!(generate_scene(&c), Err(SynthError::InvalidConfig(_))));
        // every box behind the camera
        let c = SceneConfig { depth_range: (-30.0, -10.0), ..Default::default() };
        assert!(generate_scene(&c).is_err());
        let c = SceneConfig { lateral_range: (500.0, 600.0), ..Default::default() };
        assert_eq!(generate_scene(&c), Err(SynthError::EmptyScene));
    }

    #[test]
    fn hull_and_raster() {
        let pts = [
            Vector2::new(0.0, 0.0),
            Vector2::new(4.0, 0.0),
            Vector2::new(4.0, 4.0),
            Vector2::new(0.0, 4.0),
            Vector2::new(2.0, 2.0),
            Vector2::new(2.0, 0.0),
        ];
        let hull = convex_hull(&pts);
        assert_eq!(hull.len(), 4);
        let mut m = SemanticMask::filled(8, 8, 0);
        rasterize_hull(&convex_hull(&[Vector2::new(1.2, 1.2), Vector2::new(2.8, 1.2), Vector2::new(2.0, 2.6)]), &mut m, 1);
        // every corner of the triangle rounds onto a marked pixel
        for (u, v) in [(1, 1), (3, 1), (2, 3)] {
            assert_eq!(m.get(u, v), 1);
        }
        assert_eq!(m.get(5, 5), 0);
    }

    #[test]
    fn perturbation_bounds() {
        let gt = SceneConfig::default().gt_params();
        assert_eq!(perturb_params(&gt, 0.0, 0.0, 5), gt);
        for seed in 0..200 {
            let p = perturb_params(&gt, 0.1, 10.0, seed);
            assert!((p.translation - gt.translation).amax() <= 0.1);
            assert_eq!(p.delay, gt.delay);
            let angle = crate::metrics::qad(&gt.rotation(), &p.rotation()).unwrap();
            // three axes of at most 10 degrees each
            assert!(angle <= 10.0 * 3f64.sqrt() + 1e-9);
        }
    }

    #[test]
    fn two_view_outlier_fraction_is_exact() {
        let pose = RigidTransform::from_axis_angle(&Vector3::new(0.01, -0.02, 0.005), Vector3::new(0.1, 0.0, -0.8));
        let mut cfg = TwoViewConfig::from_scene(&SceneConfig::default(), pose);
        let s = make_two_view_correspondences(&cfg).unwrap();
        assert_eq!(s.correspondences.len(), 100);
        for (a, b) in &s.correspondences.pairs {
            assert!(pose_sampson_distance(&pose, &cfg.intrinsics, a, b) < 1e-9);
        }
        cfg.outlier_fraction = 0.2;
        let s = make_two_view_correspondences(&cfg).unwrap();
        assert_eq!(s.outliers.iter().filter(|&&o| o).count(), 20);
        for ((a, b), out) in s.correspondences.pairs.iter().zip(&s.outliers) {
            assert_eq!(pose_sampson_distance(&pose, &cfg.intrinsics, a, b) > 1.0, *out);
        }
    }
}
