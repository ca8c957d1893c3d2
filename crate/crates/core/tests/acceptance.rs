//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr (bypassing the harness capture) and then asserts the same condition.

use std::io::Write;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use lcsync::alignment::{
    bidirectional_loss, build_nearest_pixel_index, downsample_pixels, loss_pixel_to_point, loss_point_to_pixel,
    project_cloud, LossTerms, PixelPoint,
};
use lcsync::calibrate::*;
use lcsync::geometry::{axis_angle_to_matrix, matrix_to_axis_angle, CalibrationParams, CameraIntrinsics};
use lcsync::metrics::{atd, delay_error, mean, median, qad, CalibrationError};
use lcsync::odometry::{decompose_essential, estimate_essential_ransac, RansacConfig};
use lcsync::report::ResultFile;
use lcsync::semantic_io::{SemanticMask, SemanticPointCloud};
use lcsync::synth::*;
use lcsync::RigidTransform;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

const STATIC_SCENES: u64 = 20;
const JOINT_SCENES: u64 = 10;

/// The heavy runs take this lock so that wall-clock timings are not shared
/// with other tests on the same core.
static HEAVY: Mutex<()> = Mutex::new(());

fn report(n: u32, pass: bool, text: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    writeln!(std::io::stderr().lock(), "[criterion {n:2}] {tag} {text}").unwrap();
}

fn still_scene(seed: u64) -> (SceneConfig, SceneBundle) {
    let c = SceneConfig { seed, ..Default::default() };
    let s = generate_scene(&c).unwrap();
    (c, s)
}

fn frame_of(c: &SceneConfig, s: &SceneBundle, velocity: Option<Vector3<f64>>, rate: f64, seed: u64) -> FrameBundle {
    FrameBundle::new(&s.cloud, &s.mask, c.cloud_class, c.mask_class as u32, s.intrinsics, velocity, rate, seed).unwrap()
}

fn init_for(gt: &CalibrationParams, seed: u64) -> CalibrationParams {
    perturb_params(gt, 0.1, 10.0, 1000 + seed)
}

struct StaticRun {
    result: CalibrationResult,
    error: CalibrationError,
}

struct StaticBatch {
    runs: Vec<StaticRun>,
    seconds: f64,
}

fn run_static_batch(config: &OptimizerConfig) -> StaticBatch {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let runs = (0..STATIC_SCENES)
        .map(|seed| {
            let (c, s) = still_scene(seed);
            let frame = frame_of(&c, &s, None, config.sample_rate, seed);
            let result = calibrate_static(&[frame], &init_for(&s.gt, seed), config).unwrap();
            let error = CalibrationError::between(&s.gt, &result.params, false).unwrap();
            StaticRun { result, error }
        })
        .collect();
    StaticBatch { runs, seconds: start.elapsed().as_secs_f64() }
}

fn bidirectional_batch() -> &'static StaticBatch {
    static B: OnceLock<StaticBatch> = OnceLock::new();
    B.get_or_init(|| run_static_batch(&default_static_config()))
}

fn failed(batch: &StaticBatch) -> usize {
    batch.runs.iter().filter(|r| r.result.status == CalibrationStatus::Failed).count()
}

fn col(batch: &StaticBatch, f: fn(&CalibrationError) -> f64) -> Vec<f64> {
    batch.runs.iter().map(|r| f(&r.error)).collect()
}

#[test]
fn criterion_01_static_recovery() {
    let b = bidirectional_batch();
    let aead = median(&col(b, |e| e.aead_deg)).unwrap();
    let atd_cm = median(&col(b, |e| e.atd_cm)).unwrap();
    let n_failed = failed(b);
    let pass = aead <= 0.5 && atd_cm <= 5.0 && n_failed <= 2 && b.seconds <= 60.0;
    report(
        1,
        pass,
        format!(
            "static recovery over {STATIC_SCENES} scenes: median AEAD {aead:.3} deg (<= 0.5), median ATD {atd_cm:.2} cm (<= 5), \
             failed {n_failed}/{STATIC_SCENES} (<= 2), {:.1} s (<= 60)",
            b.seconds
        ),
    );
    assert!(pass);
}

struct JointRun {
    delay_error_ms: f64,
    error: CalibrationError,
}

fn run_joint(delay: f64) -> Vec<JointRun> {
    let statics = bidirectional_batch();
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let jconf = default_joint_config();
    (0..JOINT_SCENES)
        .map(|seed| {
            let c = SceneConfig { seed, gt_delay: delay, gt_velocity: Vector3::new(0.0, 0.0, 8.0), ..Default::default() };
            let s = generate_scene(&c).unwrap();
            let frames = [frame_of(&c, &s, Some(s.velocity), jconf.sample_rate, seed)];
            let st = &statics.runs[seed as usize].result.params;
            let d0 = delay_grid_search(&frames, st, (-0.5, 0.5), 0.01, &jconf).unwrap();
            let r = calibrate_joint(&frames, st, d0, &jconf).unwrap();
            let error = CalibrationError::between(&s.gt, &r.params, true).unwrap();
            JointRun { delay_error_ms: error.delay_error_ms.unwrap(), error }
        })
        .collect()
}

#[test]
fn criterion_02_joint_recovery() {
    let mut pass = true;
    let mut parts = Vec::new();
    for (delay, tol_ms) in [(0.1, 10.0), (0.2, 20.0), (0.3, 30.0)] {
        let runs = run_joint(delay);
        let d = median(&runs.iter().map(|r| r.delay_error_ms).collect::<Vec<_>>()).unwrap();
        let aead = median(&runs.iter().map(|r| r.error.aead_deg).collect::<Vec<_>>()).unwrap();
        let atd_cm = median(&runs.iter().map(|r| r.error.atd_cm).collect::<Vec<_>>()).unwrap();
        let ok = d <= tol_ms && aead <= 0.5 && atd_cm <= 5.0;
        pass &= ok;
        parts.push(format!(
            "delay {:.0} ms: median delay error {d:.2} ms (<= {tol_ms:.0}), AEAD {aead:.3} deg (<= 0.5), ATD {atd_cm:.2} cm (<= 5)",
            delay * 1000.0
        ));
    }
    report(2, pass, format!("joint recovery over {JOINT_SCENES} moving scenes at 8 m/s: {}", parts.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_03_ablation_direction() {
    let bi = bidirectional_batch();
    let mut single_conf = default_static_config();
    single_conf.schedule = single_conf.schedule.with_constant_weight(0.0).unwrap();
    let single = run_static_batch(&single_conf);
    let (fb, fs) = (failed(bi), failed(&single));
    let (atd_b, atd_s) = (mean(&col(bi, |e| e.atd_cm)).unwrap(), mean(&col(&single, |e| e.atd_cm)).unwrap());
    let (aead_b, aead_s) = (mean(&col(bi, |e| e.aead_deg)).unwrap(), mean(&col(&single, |e| e.aead_deg)).unwrap());
    let pass = fs >= fb && atd_b <= atd_s && aead_b <= aead_s;
    report(
        3,
        pass,
        format!(
            "ablation: failures single {fs} >= bidirectional {fb}; mean ATD bidirectional {atd_b:.2} <= single {atd_s:.2} cm; \
             mean AEAD bidirectional {aead_b:.3} <= single {aead_s:.3} deg"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_hyperparameters() {
    let s = default_static_config();
    let j = default_joint_config();
    let pass = s.schedule.weight_at(0) == Some(20.0)
        && s.schedule.weight_at(19) == Some(20.0)
        && s.schedule.weight_at(20) == Some(1.0)
        && s.schedule.weight_at(49) == Some(1.0)
        && s.schedule.weight_at(50) == Some(0.02)
        && s.schedule.weight_at(59) == Some(0.02)
        && s.schedule.total_iterations() == 60
        && s.sample_rate == 0.02
        && j.schedule.segments() == [(20, 5.0)]
        && j.schedule.total_iterations() == 20
        && j.lambda1 == 1e6
        && j.lambda2 == 1e9
        && s.fd_epsilon_rot == 1e-4
        && s.fd_epsilon_trans == 1e-3
        && j.fd_epsilon_delay == 1e-4
        && s.failure_loss_threshold == 50.0;
    report(
        4,
        pass,
        "defaults: static w 20/1/0.02 at iterations 0/20/50 over 60, joint w 5 for 20, lambda 1e6/1e9, sample rate 0.02".into(),
    );
    assert!(pass);
}

fn random_mask(rng: &mut SplitMix64, w: u32, h: u32, class: u8) -> SemanticMask {
    let density = rng.random_range(0.01..0.6);
    let mut m = SemanticMask::filled(w, h, 0);
    for v in 0..h {
        for u in 0..w {
            if rng.random::<f64>() < density {
                m.set(u, v, class);
            }
        }
    }
    if m.count_class(class as u32) == 0 {
        m.set(rng.random_range(0..w), rng.random_range(0..h), class);
    }
    m
}

fn brute_nearest(mask: &SemanticMask, class: u32, u: u32, v: u32) -> (u32, u32) {
    let mut best = (u64::MAX, 0, 0);
    for fv in 0..mask.height {
        for fu in 0..mask.width {
            if mask.get(fu, fv) as u32 != class {
                continue;
            }
            let d = (fu as i64 - u as i64).pow(2) as u64 + (fv as i64 - v as i64).pow(2) as u64;
            if (d, fv, fu) < best {
                best = (d, fv, fu);
            }
        }
    }
    (best.2, best.1)
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn criterion_05_loss_oracles() {
    let mut rng = SplitMix64::seed_from_u64(5);
    let mut pass = true;
    let mut worst: f64 = 0.0;
    for scene in 0..50 {
        let (w, h) = (rng.random_range(8..48u32), rng.random_range(8..40u32));
        let k = CameraIntrinsics::new(40.0, 40.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap();
        let mask = random_mask(&mut rng, w, h, 3);
        let n = rng.random_range(5..80);
        let points = (0..n)
            .map(|_| Vector3::new(rng.random_range(-4.0..4.0), rng.random_range(-3.0..3.0), rng.random_range(3.0..10.0)))
            .collect();
        let cloud = SemanticPointCloud::new(points, vec![1; n], scene);
        let params = CalibrationParams::new(
            Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
            Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
            0.0,
        );
        let projected = project_cloud(&cloud, &params, &Vector3::zeros(), &k);
        if projected.is_empty() {
            continue;
        }
        let index = build_nearest_pixel_index(&mask, 3).unwrap();
        let sampled = downsample_pixels(&mask, 3, rng.random_range(0.05..1.0), scene as u64).unwrap();

        let p2i_brute: f64 = projected
            .pixels
            .iter()
            .map(|p: &PixelPoint| {
                let cu = p.u.round().clamp(0.0, (w - 1) as f64) as u32;
                let cv = p.v.round().clamp(0.0, (h - 1) as f64) as u32;
                let (nu, nv) = brute_nearest(&mask, 3, cu, cv);
                (p.u - nu as f64).powi(2) + (p.v - nv as f64).powi(2)
            })
            .sum();
        let i2p_brute: f64 = sampled
            .pixels
            .iter()
            .map(|&(u, v)| {
                projected
                    .pixels
                    .iter()
                    .map(|p| (p.u - u as f64).powi(2) + (p.v - v as f64).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        let p2i = loss_point_to_pixel(&projected, &index).unwrap();
        let i2p = loss_pixel_to_point(&sampled, &projected).unwrap();
        worst = worst.max((p2i - p2i_brute).abs() / p2i_brute.max(1e-300)).max((i2p - i2p_brute).abs() / i2p_brute.max(1e-300));
        pass &= rel_close(p2i, p2i_brute, 1e-9) && rel_close(i2p, i2p_brute, 1e-9);

        let wt = rng.random_range(0.0..25.0);
        let composed = p2i + wt * (projected.len() as f64 / sampled.len() as f64) * i2p;
        let terms = LossTerms::compute(&projected, &index, &sampled).unwrap();
        pass &= bidirectional_loss(&projected, &index, &sampled, wt).unwrap() == composed && terms.combine(wt) == composed;
    }
    report(5, pass, format!("loss oracles on 50 scenes: worst relative deviation {worst:.2e} (<= 1e-9), composition exact"));
    assert!(pass);
}

#[test]
fn criterion_06_feature_transform() {
    let mut rng = SplitMix64::seed_from_u64(6);
    let mut mismatches = 0usize;
    for _ in 0..100 {
        let (w, h) = (rng.random_range(1..=128u32), rng.random_range(1..=128u32));
        let mask = random_mask(&mut rng, w, h, 1);
        let feats: Vec<(i64, i64)> = (0..h)
            .flat_map(|v| (0..w).map(move |u| (u, v)))
            .filter(|&(u, v)| mask.get(u, v) == 1)
            .map(|(u, v)| (u as i64, v as i64))
            .collect();
        let index = build_nearest_pixel_index(&mask, 1).unwrap();
        for v in 0..h {
            for u in 0..w {
                let brute = feats.iter().map(|&(fu, fv)| ((fu - u as i64).pow(2) + (fv - v as i64).pow(2)) as u64).min().unwrap();
                mismatches += (index.squared_distance(u, v) != brute) as usize;
            }
        }
    }
    let pass = mismatches == 0;
    report(6, pass, format!("feature transform on 100 masks up to 128x128: {mismatches} distance mismatches (== 0)"));
    assert!(pass);
}

fn random_rotation(rng: &mut SplitMix64) -> Matrix3<f64> {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
    axis_angle_to_matrix(&(axis * rng.random_range(0.0..std::f64::consts::PI)))
}

#[test]
fn criterion_07_metric_oracles() {
    let mut rng = SplitMix64::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b) = (random_rotation(&mut rng), random_rotation(&mut rng));
        let rel = matrix_to_axis_angle(&(a.transpose() * b)).norm();
        worst = worst.max((qad(&a, &b).unwrap().to_radians() - rel).abs());
    }
    let atd_ok = atd(&Vector3::zeros(), &Vector3::new(0.03, -0.06, 0.09)) == 6.0
        && atd(&Vector3::new(1.0, 2.0, 3.0), &Vector3::new(1.0, 2.0, 3.0)) == 0.0
        && atd(&Vector3::new(0.1, 0.0, 0.0), &Vector3::new(0.0, 0.0, 0.0)) == 10.0 / 3.0;
    let d = delay_error(0.1, 0.1034);
    let delay_ok = (d - 3.4).abs() < 1e-9 && delay_error(0.3, 0.3) == 0.0;
    let pass = worst <= 1e-9 && atd_ok && delay_ok;
    report(
        7,
        pass,
        format!("metrics: QAD vs relative angle worst {worst:.2e} rad over 1000 pairs (<= 1e-9), ATD hand cases exact, 0.1 vs 0.1034 s -> {d:.6} ms"),
    );
    assert!(pass);
}

#[test]
fn criterion_08_epipolar_pipeline() {
    let pose = RigidTransform::from_axis_angle(&Vector3::new(0.02, -0.03, 0.01), Vector3::new(0.2, -0.05, -0.9));
    let mut cfg = TwoViewConfig::from_scene(&SceneConfig { seed: 8, ..Default::default() }, pose);
    cfg.n_points = 100;
    cfg.outlier_fraction = 0.2;
    // street-scene features start nearer than the calibration targets
    cfg.depth_range = (5.0, 30.0);
    let scene = make_two_view_correspondences(&cfg).unwrap();
    let ransac = RansacConfig { iterations: 500, seed: 8, ..Default::default() };
    let run = || {
        let (e, inliers) = estimate_essential_ransac(&scene.correspondences, &cfg.intrinsics, &ransac).unwrap();
        decompose_essential(&e, &scene.correspondences, &inliers, &cfg.intrinsics).unwrap()
    };
    let (r1, r2) = (run(), run());
    let rot_err = qad(pose.rotation(), &r1.rotation).unwrap();
    let dir_err = r1.translation_direction.angle(&pose.translation().normalize()).to_degrees();
    let outliers = scene.outliers.iter().filter(|&&o| o).count();
    let pass = scene.correspondences.len() == 100 && outliers == 20 && rot_err <= 0.1 && dir_err <= 0.5 && r1 == r2;
    report(
        8,
        pass,
        format!(
            "two-view, 100 pairs with {outliers} outliers, 500 trials: rotation {rot_err:.2e} deg (<= 0.1), direction {dir_err:.2e} deg (<= 0.5), repeatable {}",
            r1 == r2
        ),
    );
    assert!(pass);
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn criterion_09_determinism() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let seed = 3;
    let (c, s) = still_scene(seed);
    let sconf = default_static_config();
    let jconf = default_joint_config();
    let frame = frame_of(&c, &s, None, sconf.sample_rate, seed);
    let mc = SceneConfig { gt_delay: 0.1, gt_velocity: Vector3::new(0.0, 0.0, 8.0), ..c.clone() };
    let ms = generate_scene(&mc).unwrap();
    let moving = [frame_of(&mc, &ms, Some(ms.velocity), jconf.sample_rate, seed)];
    let run = |threads: usize| {
        in_pool(threads, || {
            let st = calibrate_static(std::slice::from_ref(&frame), &init_for(&s.gt, seed), &sconf).unwrap();
            let d0 = delay_grid_search(&moving, &st.params, (-0.5, 0.5), 0.01, &jconf).unwrap();
            let jt = calibrate_joint(&moving, &st.params, d0, &jconf).unwrap();
            (ResultFile::from_result(&st).to_json(), ResultFile::from_result(&jt).to_json())
        })
    };
    let a = run(1);
    let b = run(1);
    let c4 = run(4);
    let pass = a == b && a == c4;
    report(9, pass, format!("determinism: static and joint result.json identical across repeat runs and 1 vs 4 threads: {pass}"));
    assert!(pass);
}

#[test]
fn criterion_10_zero_excitation() {
    let (c, s) = still_scene(10);
    let jconf = default_joint_config();
    let frames = [frame_of(&c, &s, Some(Vector3::zeros()), jconf.sample_rate, 10)];
    let r = calibrate_joint(&frames, &s.gt, 0.0, &jconf).unwrap();
    let pass = r.status == CalibrationStatus::Failed && r.failure_reason.as_deref() == Some("zero excitation");
    report(10, pass, format!("zero-velocity joint run: status {}, reason {:?}", r.status.as_str(), r.failure_reason));
    assert!(pass);
}
