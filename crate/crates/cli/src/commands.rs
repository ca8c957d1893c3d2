use std::fs;
use std::path::{Path, PathBuf};

use lcsync::alignment::project_cloud;
use lcsync::calibrate;
use lcsync::metrics::summarize;
use lcsync::odometry::{save_velocity_csv, RansacConfig, ScaleSource, VelocityEstimate};
use lcsync::semantic_io::{filter_by_class, save_correspondences_csv, save_mask_pgm, save_point_cloud_csv};
use lcsync::synth::{default_intrinsics, generate_scene, make_two_view_correspondences, SceneConfig, TwoViewConfig};
use lcsync::{
    default_joint_config, default_static_config, delay_grid_search, CalibrationError,
    CalibrationParams, CalibrationResult, CalibrationStatus, CameraIntrinsics, FrameBundle, GroundTruthFile, OptimizerConfig,
    ResultFile, RigidTransform,
};
use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::inputs::{
    frame_entries, load_config, load_frame_data, load_intrinsics, load_motion, parse_init, parse_vec3, FrameEntry, MotionOptions,
};
use crate::{overlay, CliError, EvalArgs, FrameArgs, JointArgs, OverlayArgs, StaticArgs, SynthArgs};

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    args: &'a [String],
    inputs: Vec<String>,
    config: Option<String>,
    seed: Option<u64>,
    out: String,
    tool_version: &'static str,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn write_manifest(
    out: &Path,
    command: &str,
    args: &[String],
    inputs: Vec<String>,
    config: Option<&PathBuf>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    create_dir(out)?;
    let m = RunManifest {
        command,
        args,
        inputs,
        config: config.map(|p| show(p)),
        seed,
        out: show(out),
        tool_version: env!("CARGO_PKG_VERSION"),
    };
    let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    text.push('\n');
    write_file(&out.join("manifest.json"), text)
}

fn frame_name(k: usize, what: &str) -> String {
    format!("frame_{k:03}_{what}")
}

pub fn synth(a: &SynthArgs, argv: &[String]) -> Result<(), CliError> {
    let velocity = parse_vec3(&a.velocity, "--velocity")?;
    if a.frames == 0 {
        return Err(CliError::Usage("--frames must be at least 1".into()));
    }
    if !(a.frame_dt > 0.0) {
        return Err(CliError::Usage("--frame-dt must be positive".into()));
    }
    let intrinsics = match &a.intrinsics {
        Some(p) => load_intrinsics(p)?,
        None => default_intrinsics(),
    };
    let base = SceneConfig {
        n_clusters: a.clusters,
        points_per_cluster: a.points_per_cluster,
        gt_delay: a.delay,
        gt_velocity: velocity,
        intrinsics,
        label_flip_rate: a.label_flip,
        seed: a.seed,
        ..Default::default()
    };
    base.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let inputs = a.intrinsics.iter().map(|p| show(p)).collect();
    write_manifest(&a.out, "synth", argv, inputs, None, Some(a.seed))?;

    let moving = velocity.norm() > 0.0;
    let mut vel_manifest = String::new();
    let mut corr_manifest = String::new();
    let mut gt = None;
    for k in 0..a.frames {
        let config = SceneConfig { seed: a.seed.wrapping_add(k as u64), ..base.clone() };
        let scene = generate_scene(&config).map_err(|e| CliError::Io(format!("scene generation failed: {e}")))?;
        let (cloud, mask, vel) = (frame_name(k, "cloud.csv"), frame_name(k, "mask.pgm"), frame_name(k, "velocity.csv"));
        save_point_cloud_csv(&scene.cloud, a.out.join(&cloud))?;
        save_mask_pgm(&scene.mask, a.out.join(&mask))?;
        let estimate = VelocityEstimate { frame_id: k as i64, v: velocity, scale_source: ScaleSource::SuppliedVector, frame_dt: 0.0 };
        save_velocity_csv(&[estimate], a.out.join(&vel))?;
        vel_manifest.push_str(&format!("{cloud},{mask},{vel}\n"));
        if moving {
            // the second view is displaced by the frame motion, x2 = x1 + v dt
            let pose = RigidTransform::new(Matrix3::identity(), velocity * a.frame_dt).expect("identity rotation");
            let mut tv = TwoViewConfig::from_scene(&config, pose);
            tv.outlier_fraction = a.outliers;
            let two = make_two_view_correspondences(&tv).map_err(|e| CliError::Usage(format!("correspondences: {e}")))?;
            let corr = frame_name(k, "corr.csv");
            save_correspondences_csv(&two.correspondences, a.out.join(&corr))?;
            corr_manifest.push_str(&format!("{cloud},{mask},{corr}\n"));
        }
        gt.get_or_insert(scene.gt);
    }
    write_file(&a.out.join("intrinsics.txt"), intrinsics.to_key_value())?;
    write_file(&a.out.join("frames.txt"), vel_manifest)?;
    if moving {
        write_file(&a.out.join("frames_corr.txt"), corr_manifest)?;
    }
    let gt = gt.expect("at least one frame");
    GroundTruthFile::new(&gt, &velocity).save(a.out.join("gt.json"))?;
    println!("wrote {} frame(s) to {}", a.frames, a.out.display());
    Ok(())
}

fn entry_inputs(entries: &[FrameEntry], extra: &[&Path]) -> Vec<String> {
    let mut v: Vec<String> = entries
        .iter()
        .flat_map(|e| [Some(&e.cloud), Some(&e.mask), e.motion.as_ref()].into_iter().flatten().map(|p| show(p)))
        .collect();
    v.extend(extra.iter().map(|p| show(p)));
    v
}

fn build_frame(
    entry: &FrameEntry,
    index: usize,
    args: &FrameArgs,
    k: CameraIntrinsics,
    velocity: Option<Vector3<f64>>,
    config: &OptimizerConfig,
) -> Result<FrameBundle, CliError> {
    let (cloud, mask) = load_frame_data(entry)?;
    if (mask.width, mask.height) != (k.width, k.height) {
        return Err(CliError::Usage(format!(
            "{}: mask is {}x{} but the intrinsics describe {}x{}",
            entry.mask.display(),
            mask.width,
            mask.height,
            k.width,
            k.height
        )));
    }
    let seed = config.sample_seed.wrapping_add(index as u64);
    Ok(FrameBundle::new(&cloud, &mask, args.class_id_cloud, args.class_id_mask, k, velocity, config.sample_rate, seed)?)
}

fn write_result(out: &Path, result: &CalibrationResult, gt: Option<&PathBuf>, with_delay: bool) -> Result<(), CliError> {
    let file = ResultFile::from_result(result);
    file.save(out.join("result.json"))?;
    println!(
        "status {} after {} iterations, final loss {:.6}",
        file.status,
        file.iterations,
        result.final_loss
    );
    let p = &result.params;
    println!(
        "axis-angle [{:.6}, {:.6}, {:.6}] rad, translation [{:.4}, {:.4}, {:.4}] m, delay {:.4} s",
        p.axis_angle.x, p.axis_angle.y, p.axis_angle.z, p.translation.x, p.translation.y, p.translation.z, p.delay
    );
    if let Some(gt_path) = gt {
        let g = GroundTruthFile::load(gt_path)?;
        let e = CalibrationError::between(&g.params(), &file.params(), with_delay).map_err(|e| CliError::Usage(e.to_string()))?;
        write_file(&out.join("metrics.json"), e.to_json() + "\n")?;
        write_file(&out.join("metrics.txt"), e.to_key_value())?;
        print!("{}", e.to_key_value());
    }
    Ok(())
}

fn status_exit(result: &CalibrationResult) -> Result<(), CliError> {
    if result.status != CalibrationStatus::Failed {
        return Ok(());
    }
    let reason = result.failure_reason.clone().unwrap_or_else(|| "optimization failed".into());
    if reason == "zero excitation" {
        Err(CliError::Unidentifiable(reason))
    } else {
        Err(CliError::Optimization(reason))
    }
}

pub fn calibrate_static(a: &StaticArgs, argv: &[String]) -> Result<(), CliError> {
    let f = &a.frames;
    let init = parse_init(&a.init)?;
    let config = load_config(default_static_config(), f)?;
    let k = load_intrinsics(&f.intrinsics)?;
    let entries = frame_entries(f, None)?;
    let mut extra: Vec<&Path> = vec![&f.intrinsics];
    if Path::new(&a.init).exists() {
        extra.push(Path::new(&a.init));
    }
    write_manifest(&f.out, "calibrate-static", argv, entry_inputs(&entries, &extra), f.config.as_ref(), Some(config.sample_seed))?;
    let frames: Vec<FrameBundle> =
        entries.iter().enumerate().map(|(i, e)| build_frame(e, i, f, k, None, &config)).collect::<Result<_, _>>()?;
    let result = calibrate::calibrate_static(&frames, &init, &config)?;
    write_result(&f.out, &result, f.gt.as_ref(), false)?;
    status_exit(&result)
}

fn parse_range(text: &str) -> Result<(f64, f64), CliError> {
    let v: Vec<f64> = text.split(',').map(|s| s.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad_range(text))?;
    match v.as_slice() {
        [lo, hi] if lo.is_finite() && hi.is_finite() && lo <= hi => Ok((*lo, *hi)),
        _ => Err(bad_range(text)),
    }
}

fn bad_range(text: &str) -> CliError {
    CliError::Usage(format!("--delay-range: expected \"lo,hi\" with lo <= hi, got '{text}'"))
}

pub fn calibrate_joint(a: &JointArgs, argv: &[String]) -> Result<(), CliError> {
    let f = &a.frames;
    let static_file = ResultFile::load(&a.static_result)?;
    let anchor: CalibrationParams = static_file.params().with_delay(0.0);
    let config = load_config(default_joint_config(), f)?;
    let k = load_intrinsics(&f.intrinsics)?;
    let range = parse_range(&a.delay_range)?;
    if !(a.delay_step > 0.0) {
        return Err(CliError::Usage("--delay-step must be positive".into()));
    }
    let entries = frame_entries(f, a.motion.as_ref())?;
    if let Some(i) = entries.iter().position(|e| e.motion.is_none()) {
        return Err(CliError::Usage(format!("frame {i} has no velocity or correspondence file")));
    }
    write_manifest(
        &f.out,
        "calibrate-joint",
        argv,
        entry_inputs(&entries, &[&f.intrinsics, &a.static_result]),
        f.config.as_ref(),
        Some(config.sample_seed),
    )?;
    let opts = MotionOptions {
        speed: a.speed,
        frame_dt: a.frame_dt,
        ransac: RansacConfig { iterations: a.ransac_iterations, seed: config.sample_seed, ..Default::default() },
    };
    let mut velocities = Vec::with_capacity(entries.len());
    let mut frames = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let v = load_motion(e.motion.as_ref().expect("checked above"), i, &k, &opts)?;
        velocities.push(VelocityEstimate { frame_id: i as i64, v, scale_source: ScaleSource::SuppliedVector, frame_dt: 0.0 });
        frames.push(build_frame(e, i, f, k, Some(v), &config)?);
    }
    save_velocity_csv(&velocities, f.out.join("velocities.csv"))?;

    let mean_speed = velocities.iter().map(|v| v.v.norm()).sum::<f64>() / velocities.len() as f64;
    let init_delay = match a.init_delay {
        Some(d) => d,
        // the grid is meaningless without motion; the joint stage reports it
        None if mean_speed < config.min_speed => 0.0,
        None => {
            let d = delay_grid_search(&frames, &anchor, range, a.delay_step, &config)?;
            println!("grid search initial delay {d:.3} s");
            d
        }
    };
    let result = calibrate::calibrate_joint(&frames, &anchor, init_delay, &config)?;
    write_result(&f.out, &result, f.gt.as_ref(), true)?;
    status_exit(&result)
}

#[derive(Serialize)]
struct EvalRun {
    result: String,
    gt: String,
    #[serde(flatten)]
    error: CalibrationError,
}

#[derive(Serialize)]
struct EvalReport {
    runs: Vec<EvalRun>,
    mean: CalibrationError,
    median: CalibrationError,
    count: usize,
}

pub fn eval(a: &EvalArgs, argv: &[String]) -> Result<(), CliError> {
    if a.gts.len() != 1 && a.gts.len() != a.results.len() {
        return Err(CliError::Usage(format!("got {} --gt files for {} results; pass one or one per result", a.gts.len(), a.results.len())));
    }
    if let Some(out) = &a.out {
        let inputs = a.results.iter().chain(&a.gts).map(|p| show(p)).collect();
        write_manifest(out, "eval", argv, inputs, None, None)?;
    }
    let mut runs = Vec::with_capacity(a.results.len());
    for (i, r) in a.results.iter().enumerate() {
        let g = if a.gts.len() == 1 { &a.gts[0] } else { &a.gts[i] };
        let est = ResultFile::load(r)?.params();
        let truth = GroundTruthFile::load(g)?.params();
        let error = CalibrationError::between(&truth, &est, true).map_err(|e| CliError::Usage(format!("{}: {e}", r.display())))?;
        runs.push(EvalRun { result: show(r), gt: show(g), error });
    }
    let errors: Vec<CalibrationError> = runs.iter().map(|r| r.error).collect();
    let s = summarize(&errors).expect("at least one result");
    println!("{:<40} {:>10} {:>10} {:>10} {:>12}", "result", "QAD deg", "AEAD deg", "ATD cm", "delay ms");
    let row = |name: &str, e: &CalibrationError| {
        println!(
            "{:<40} {:>10.4} {:>10.4} {:>10.3} {:>12.3}",
            name,
            e.qad_deg,
            e.aead_deg,
            e.atd_cm,
            e.delay_error_ms.unwrap_or(0.0)
        )
    };
    for r in &runs {
        row(&r.result, &r.error);
    }
    row("mean", &s.mean);
    row("median", &s.median);
    if let Some(out) = &a.out {
        let report = EvalReport { runs, mean: s.mean, median: s.median, count: s.count };
        let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
        text.push('\n');
        write_file(&out.join("eval.json"), text)?;
    }
    Ok(())
}

pub fn render_overlay(a: &OverlayArgs, argv: &[String]) -> Result<(), CliError> {
    let mut params = parse_init(&a.params)?;
    if let Some(d) = a.delay {
        params = params.with_delay(d);
    }
    let velocity = match &a.velocity {
        Some(v) => parse_vec3(v, "--velocity")?,
        None => Vector3::zeros(),
    };
    let k = load_intrinsics(&a.intrinsics)?;
    let mut inputs = vec![show(&a.cloud), show(&a.mask), show(&a.intrinsics)];
    if Path::new(&a.params).exists() {
        inputs.push(a.params.clone());
    }
    write_manifest(&a.out, "render-overlay", argv, inputs, None, None)?;
    let entry = FrameEntry { cloud: a.cloud.clone(), mask: a.mask.clone(), motion: None };
    let (cloud, mask) = load_frame_data(&entry)?;
    if (mask.width, mask.height) != (k.width, k.height) {
        return Err(CliError::Usage(format!("{}: mask size does not match the intrinsics", a.mask.display())));
    }
    let projected = project_cloud(&filter_by_class(&cloud, a.class_id_cloud), &params, &velocity, &k);
    let (image, audit) = overlay::render(&mask, a.class_id_mask, &projected);
    write_file(&a.out.join("overlay.ppm"), image)?;
    if audit.splats == 0 {
        eprintln!("warning: no points of class {} project into the image", a.class_id_cloud);
    }
    println!(
        "splats {} centered on class {} touching class {} off class {}",
        audit.splats,
        audit.centered_on_class,
        audit.touching_class,
        audit.off_class()
    );
    Ok(())
}
