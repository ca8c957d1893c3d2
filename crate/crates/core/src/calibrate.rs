//! Two-stage calibration: static extrinsic refinement on the scheduled
//! bidirectional loss, then joint extrinsic plus delay estimation anchored to
//! the static result.
//!
//! Each iteration takes one central finite-difference gradient in local
//! coordinates around the current estimate (rotation increment composed on the
//! camera side, additive translation and delay) and a backtracking line search
//! that also stretches a first-try success while the loss keeps falling.
//! The search direction is a BFGS step in epsilon-scaled units when it
//! descends, else the normalized gradient. Nearest-pixel and nearest-point
//! matches are recomputed inside every evaluation.

use std::fmt;

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;

use crate::alignment::{
    bidirectional_loss, build_nearest_pixel_index, downsample_pixels, project_cloud, AlignmentError, LossTerms,
    NearestPixelIndex, ProjectedSet, SampledPixels,
};
use crate::geometry::{axis_angle_to_matrix, matrix_to_axis_angle, CalibrationParams, CameraIntrinsics};
use crate::semantic_io::{data_lines, filter_by_class, SemanticMask, SemanticPointCloud};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibrateError {
    #[error("invalid weight schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },
    #[error("frame {frame}: {source}")]
    EvaluationFailed { frame: usize, source: AlignmentError },
    #[error("every frame failed evaluation at the initial estimate")]
    AllFramesDegenerate,
    #[error("frame {frame} has no velocity")]
    MissingVelocity { frame: usize },
    #[error("no frames supplied")]
    NoFrames,
}

/// Iteration-indexed weight of the pixel-to-point term.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSchedule {
    segments: Vec<(usize, f64)>,
}

impl WeightSchedule {
    /// Weights must be finite and non-negative; a zero weight gives the
    /// point-to-pixel loss alone.
    pub fn new(segments: Vec<(usize, f64)>) -> Result<Self, CalibrateError> {
        if segments.iter().map(|s| s.0).sum::<usize>() == 0 {
            return Err(CalibrateError::InvalidSchedule("total iteration count must be positive".into()));
        }
        if let Some((_, w)) = segments.iter().find(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(CalibrateError::InvalidSchedule(format!("weight {w} must be finite and non-negative")));
        }
        Ok(Self { segments })
    }

    /// Same iteration structure with every weight replaced by `w`.
    pub fn with_constant_weight(&self, w: f64) -> Result<Self, CalibrateError> {
        Self::new(self.segments.iter().map(|&(n, _)| (n, w)).collect())
    }

    pub fn segments(&self) -> &[(usize, f64)] {
        &self.segments
    }

    pub fn total_iterations(&self) -> usize {
        self.segments.iter().map(|s| s.0).sum()
    }

    /// Weight used at 0-based iteration `l`.
    pub fn weight_at(&self, l: usize) -> Option<f64> {
        let mut end = 0;
        for &(n, w) in &self.segments {
            end += n;
            if l < end {
                return Some(w);
            }
        }
        None
    }

    /// Parses `"20:20,30:1,10:0.02"`.
    pub fn parse(text: &str) -> Result<Self, CalibrateError> {
        let mut segments = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (n, w) = part
                .split_once(':')
                .ok_or_else(|| CalibrateError::InvalidSchedule(format!("segment '{part}' is not count:weight")))?;
            let n: usize =
                n.trim().parse().map_err(|_| CalibrateError::InvalidSchedule(format!("bad iteration count '{n}'")))?;
            let w: f64 = w.trim().parse().map_err(|_| CalibrateError::InvalidSchedule(format!("bad weight '{w}'")))?;
            segments.push((n, w));
        }
        Self::new(segments)
    }
}

impl fmt::Display for WeightSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.segments.iter().map(|(n, w)| format!("{n}:{w}")).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub schedule: WeightSchedule,
    pub fd_epsilon_rot: f64,
    pub fd_epsilon_trans: f64,
    pub fd_epsilon_delay: f64,
    /// First trial step length, in units of the FD epsilons.
    pub initial_step: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub sample_rate: f64,
    pub sample_seed: u64,
    /// Pixels² per matched element.
    pub failure_loss_threshold: f64,
    /// Relative loss decrease over the last iteration below which a run counts as converged.
    pub convergence_tol: f64,
    /// Joint calibration refuses below this mean speed (m/s).
    pub min_speed: f64,
    /// When false the joint stage keeps the initial delay.
    pub optimize_delay: bool,
}

pub fn default_static_config() -> OptimizerConfig {
    OptimizerConfig {
        schedule: WeightSchedule::new(vec![(20, 20.0), (30, 1.0), (10, 0.02)]).expect("valid schedule"),
        fd_epsilon_rot: 1e-4,
        fd_epsilon_trans: 1e-3,
        fd_epsilon_delay: 1e-4,
        initial_step: 50.0,
        backtrack_factor: 0.5,
        max_backtracks: 10,
        lambda1: 0.0,
        lambda2: 0.0,
        sample_rate: 0.02,
        sample_seed: 0,
        failure_loss_threshold: 50.0,
        convergence_tol: 1e-3,
        min_speed: 0.1,
        optimize_delay: true,
    }
}

pub fn default_joint_config() -> OptimizerConfig {
    OptimizerConfig {
        schedule: WeightSchedule::new(vec![(20, 5.0)]).expect("valid schedule"),
        lambda1: 1e6,
        lambda2: 1e9,
        ..default_static_config()
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), CalibrateError> {
        let bad = |m: String| Err(CalibrateError::InvalidConfig(m));
        for (name, v) in [
            ("fd_epsilon_rot", self.fd_epsilon_rot),
            ("fd_epsilon_trans", self.fd_epsilon_trans),
            ("fd_epsilon_delay", self.fd_epsilon_delay),
            ("initial_step", self.initial_step),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return bad(format!("backtrack_factor must be in (0, 1), got {}", self.backtrack_factor));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative".into());
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return bad(format!("sample_rate must be in (0, 1], got {}", self.sample_rate));
        }
        if !(self.failure_loss_threshold > 0.0) || !(self.convergence_tol >= 0.0) || !(self.min_speed >= 0.0) {
            return bad("failure_loss_threshold, convergence_tol and min_speed must be non-negative".into());
        }
        Ok(())
    }

    pub fn epsilons(&self, dims: usize) -> Vec<f64> {
        let mut e = vec![self.fd_epsilon_rot; 3];
        e.extend([self.fd_epsilon_trans; 3]);
        if dims == 7 {
            e.push(self.fd_epsilon_delay);
        }
        e
    }

    /// Applies `key=value` lines on top of `self`. Unknown keys are errors.
    pub fn parse_key_value(&self, text: &str) -> Result<Self, CalibrateError> {
        let mut c = self.clone();
        for (line, content) in data_lines(text) {
            let err = |message: String| CalibrateError::ConfigParse { line, message };
            let (key, value) = content.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let num = || value.parse::<f64>().map_err(|_| err(format!("invalid number '{value}' for {key}")));
            let int = || value.parse::<u64>().map_err(|_| err(format!("invalid integer '{value}' for {key}")));
            match key {
                "schedule" => c.schedule = WeightSchedule::parse(value).map_err(|e| err(e.to_string()))?,
                "fd_epsilon_rot" => c.fd_epsilon_rot = num()?,
                "fd_epsilon_trans" => c.fd_epsilon_trans = num()?,
                "fd_epsilon_delay" => c.fd_epsilon_delay = num()?,
                "initial_step" => c.initial_step = num()?,
                "backtrack_factor" => c.backtrack_factor = num()?,
                "max_backtracks" => c.max_backtracks = int()? as usize,
                "lambda1" => c.lambda1 = num()?,
                "lambda2" => c.lambda2 = num()?,
                "sample_rate" => c.sample_rate = num()?,
                "sample_seed" => c.sample_seed = int()?,
                "failure_loss_threshold" => c.failure_loss_threshold = num()?,
                "convergence_tol" => c.convergence_tol = num()?,
                "min_speed" => c.min_speed = num()?,
                "optimize_delay" => {
                    c.optimize_delay = value.parse().map_err(|_| err(format!("invalid boolean '{value}'")))?
                }
                _ => return Err(err(format!("unknown key '{key}'"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_key_value(&self) -> String {
        format!(
            "schedule={}\nfd_epsilon_rot={}\nfd_epsilon_trans={}\nfd_epsilon_delay={}\ninitial_step={}\n\
             backtrack_factor={}\nmax_backtracks={}\nlambda1={}\nlambda2={}\nsample_rate={}\nsample_seed={}\n\
             failure_loss_threshold={}\nconvergence_tol={}\nmin_speed={}\noptimize_delay={}\n",
            self.schedule,
            self.fd_epsilon_rot,
            self.fd_epsilon_trans,
            self.fd_epsilon_delay,
            self.initial_step,
            self.backtrack_factor,
            self.max_backtracks,
            self.lambda1,
            self.lambda2,
            self.sample_rate,
            self.sample_seed,
            self.failure_loss_threshold,
            self.convergence_tol,
            self.min_speed,
            self.optimize_delay,
        )
    }
}

/// `λ1·‖t − t_s‖² + λ2·‖R R_sᵀ − I‖²_F`.
pub fn regularization(params: &CalibrationParams, static_params: &CalibrationParams, lambda1: f64, lambda2: f64) -> f64 {
    let dt = (params.translation - static_params.translation).norm_squared();
    // ‖R R_sᵀ − I‖ = ‖R − R_s‖ for orthogonal R_s; this form is exactly 0 at R = R_s
    let dr = (params.rotation() - static_params.rotation()).norm_squared();
    lambda1 * dt + lambda2 * dr
}

/// One frame prepared for optimization: class-filtered cloud, nearest-pixel
/// index and a frozen pixel sample.
#[derive(Debug, Clone)]
pub struct FrameBundle {
    pub cloud: SemanticPointCloud,
    pub index: NearestPixelIndex,
    pub sampled: SampledPixels,
    pub intrinsics: CameraIntrinsics,
    /// Camera-frame velocity (m/s); required by the joint stage only.
    pub velocity: Option<Vector3<f64>>,
}

impl FrameBundle {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cloud: &SemanticPointCloud,
        mask: &SemanticMask,
        cloud_class: u32,
        mask_class: u32,
        intrinsics: CameraIntrinsics,
        velocity: Option<Vector3<f64>>,
        sample_rate: f64,
        sample_seed: u64,
    ) -> Result<Self, AlignmentError> {
        Ok(Self {
            cloud: filter_by_class(cloud, cloud_class),
            index: build_nearest_pixel_index(mask, mask_class)?,
            sampled: downsample_pixels(mask, mask_class, sample_rate, sample_seed)?,
            intrinsics,
            velocity,
        })
    }
}

fn project_frame(params: &CalibrationParams, frame: &FrameBundle, joint: bool) -> Result<ProjectedSet, AlignmentError> {
    let (p, v) = if joint {
        (*params, frame.velocity.unwrap_or_else(Vector3::zeros))
    } else {
        (params.with_delay(0.0), Vector3::zeros())
    };
    let projected = project_cloud(&frame.cloud, &p, &v, &frame.intrinsics);
    if projected.is_empty() {
        return Err(AlignmentError::EmptyProjection);
    }
    Ok(projected)
}

/// Loss of one frame. Without `static_params` (static mode) velocity and delay
/// are ignored and no regularization is added; with them the projection is
/// delay-compensated and the anchor penalty is included.
pub fn evaluate_objective(
    params: &CalibrationParams,
    frame: &FrameBundle,
    static_params: Option<&CalibrationParams>,
    config: &OptimizerConfig,
    w: f64,
) -> Result<f64, CalibrateError> {
    let data = frame_loss(params, frame, static_params.is_some(), w).map_err(|source| CalibrateError::EvaluationFailed { frame: 0, source })?;
    Ok(data + static_params.map_or(0.0, |s| regularization(params, s, config.lambda1, config.lambda2)))
}

fn frame_loss(params: &CalibrationParams, frame: &FrameBundle, joint: bool, w: f64) -> Result<f64, AlignmentError> {
    let projected = project_frame(params, frame, joint)?;
    bidirectional_loss(&projected, &frame.index, &frame.sampled, w)
}

/// Summed objective over frames, with frame indices in errors.
fn total_objective(
    params: &CalibrationParams,
    frames: &[FrameBundle],
    anchor: Option<&CalibrationParams>,
    config: &OptimizerConfig,
    w: f64,
) -> Result<f64, CalibrateError> {
    let mut sum = 0.0;
    for (i, f) in frames.iter().enumerate() {
        sum += frame_loss(params, f, anchor.is_some(), w).map_err(|source| CalibrateError::EvaluationFailed { frame: i, source })?;
    }
    Ok(sum + anchor.map_or(0.0, |s| regularization(params, s, config.lambda1, config.lambda2)))
}

/// Matched element count `n_p + n_i` summed over frames.
fn element_count(params: &CalibrationParams, frames: &[FrameBundle], joint: bool) -> usize {
    frames
        .iter()
        .filter_map(|f| {
            let p = project_frame(params, f, joint).ok()?;
            LossTerms::compute(&p, &f.index, &f.sampled).ok().map(|t| t.n_projected + t.n_sampled)
        })
        .sum()
}

/// Local coordinates around `base`: rotation increment (left-composed),
/// translation increment, then optionally a delay increment.
pub fn retract(base: &CalibrationParams, x: &[f64]) -> CalibrationParams {
    let dr = Vector3::new(x[0], x[1], x[2]);
    let rotation = axis_angle_to_matrix(&dr) * base.rotation();
    let delay = base.delay + x.get(6).copied().unwrap_or(0.0);
    CalibrationParams::new(matrix_to_axis_angle(&rotation), base.translation + Vector3::new(x[3], x[4], x[5]), delay)
}

/// A scalar objective over a flat parameter vector. Closures qualify.
pub trait Objective: Sync {
    fn evaluate(&self, x: &[f64], w: f64) -> Result<f64, CalibrateError>;
}

impl<F> Objective for F
where
    F: Fn(&[f64], f64) -> Result<f64, CalibrateError> + Sync,
{
    fn evaluate(&self, x: &[f64], w: f64) -> Result<f64, CalibrateError> {
        self(x, w)
    }
}

/// Central differences with per-dimension steps. A failed probe on one side
/// falls back to the one-sided difference; failures on both sides give 0.
pub fn fd_gradient(obj: &dyn Objective, x: &[f64], eps: &[f64], w: f64) -> Result<Vec<f64>, CalibrateError> {
    assert_eq!(x.len(), eps.len(), "one epsilon per dimension");
    let probes: Vec<(usize, f64)> = (0..x.len()).flat_map(|i| [(i, eps[i]), (i, -eps[i])]).collect();
    let values: Vec<Option<f64>> = probes
        .par_iter()
        .map(|&(i, h)| {
            let mut y = x.to_vec();
            y[i] += h;
            obj.evaluate(&y, w).ok().filter(|v| v.is_finite())
        })
        .collect();
    let center = || obj.evaluate(x, w);
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        g[i] = match (values[2 * i], values[2 * i + 1]) {
            (Some(p), Some(m)) => (p - m) / (2.0 * eps[i]),
            (Some(p), None) => (p - center()?) / eps[i],
            (None, Some(m)) => (center()? - m) / eps[i],
            (None, None) => 0.0,
        };
    }
    Ok(g)
}

/// Gradient of the summed frame objective in local coordinates at `params`;
/// `dims` is 6 (rotation, translation) or 7 (plus delay).
pub fn finite_difference_gradient(
    params: &CalibrationParams,
    frames: &[FrameBundle],
    static_params: Option<&CalibrationParams>,
    config: &OptimizerConfig,
    w: f64,
    dims: usize,
) -> Result<Vec<f64>, CalibrateError> {
    assert!(dims == 6 || dims == 7, "dims must be 6 or 7");
    let obj = |x: &[f64], w: f64| total_objective(&retract(params, x), frames, static_params, config, w);
    fd_gradient(&obj, &vec![0.0; dims], &config.epsilons(dims), w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibrationStatus {
    Converged,
    MaxIterations,
    Failed,
}

impl CalibrationStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            CalibrationStatus::Converged => "Converged",
            CalibrationStatus::MaxIterations => "MaxIterations",
            CalibrationStatus::Failed => "Failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub w: f64,
    pub loss: f64,
    pub params: CalibrationParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub params: CalibrationParams,
    pub final_loss: f64,
    pub trace: Vec<TraceEntry>,
    pub status: CalibrationStatus,
    pub failure_reason: Option<String>,
    /// `n_p + n_i` at the final estimate, summed over frames.
    pub n_elements: usize,
    /// Frames dropped because they failed evaluation at the initial estimate.
    pub excluded_frames: Vec<usize>,
}

/// Failure if the per-element loss exceeds the threshold or anything
/// non-finite appeared; otherwise converged when the last iteration improved
/// the loss by less than the relative tolerance.
pub fn detect_failure(result: &CalibrationResult, config: &OptimizerConfig) -> (CalibrationStatus, Option<String>) {
    let non_finite = !result.final_loss.is_finite()
        || !result.params.is_finite()
        || result.trace.iter().any(|e| !e.loss.is_finite() || !e.params.is_finite());
    if non_finite {
        return (CalibrationStatus::Failed, Some("non-finite value in trace".into()));
    }
    let per_element = if result.n_elements == 0 { f64::INFINITY } else { result.final_loss / result.n_elements as f64 };
    if per_element > config.failure_loss_threshold {
        return (
            CalibrationStatus::Failed,
            Some(format!(
                "final loss {per_element:.3} px² per element exceeds threshold {}",
                config.failure_loss_threshold
            )),
        );
    }
    let n = result.trace.len();
    if result.final_loss == 0.0 || n < 2 {
        return (CalibrationStatus::Converged, None);
    }
    let (prev, last) = (&result.trace[n - 2], &result.trace[n - 1]);
    let converged = prev.w != last.w || prev.loss - last.loss <= config.convergence_tol * prev.loss.abs();
    (if converged { CalibrationStatus::Converged } else { CalibrationStatus::MaxIterations }, None)
}

/// Scheduled descent shared by both stages.
fn optimize(
    frames: &[FrameBundle],
    init: CalibrationParams,
    anchor: Option<&CalibrationParams>,
    config: &OptimizerConfig,
    dims: usize,
) -> Result<CalibrationResult, CalibrateError> {
    config.validate()?;
    if frames.is_empty() {
        return Err(CalibrateError::NoFrames);
    }
    let joint = anchor.is_some();
    let w0 = config.schedule.weight_at(0).expect("non-empty schedule");
    let usable: Vec<usize> = (0..frames.len()).filter(|&i| frame_loss(&init, &frames[i], joint, w0).is_ok()).collect();
    if usable.is_empty() {
        return Err(CalibrateError::AllFramesDegenerate);
    }
    let excluded_frames: Vec<usize> = (0..frames.len()).filter(|i| !usable.contains(i)).collect();
    let frames: Vec<FrameBundle> = usable.iter().map(|&i| frames[i].clone()).collect();
    let eps = config.epsilons(dims);
    let loss_at = |p: &CalibrationParams, w: f64| total_objective(p, &frames, anchor, config, w).unwrap_or(f64::INFINITY);

    let mut params = init;
    let mut step = config.initial_step;
    let mut trace = Vec::with_capacity(config.schedule.total_iterations());
    // inverse-Hessian estimate in scaled coordinates, with the last accepted
    // step and the gradient it started from
    let mut h: Option<DMatrix<f64>> = None;
    let mut last: Option<(DVector<f64>, DVector<f64>)> = None;
    // FD probe multiplier, widened after an iteration without progress
    let mut widen = 1.0;
    for l in 0..config.schedule.total_iterations() {
        let w = config.schedule.weight_at(l).expect("iteration within schedule");
        if l > 0 && config.schedule.weight_at(l - 1) != Some(w) {
            h = None;
            last = None;
        }
        let current = loss_at(&params, w);
        let obj = |x: &[f64], w: f64| total_objective(&retract(&params, x), &frames, anchor, config, w);
        let probe: Vec<f64> = eps.iter().map(|e| e * widen).collect();
        let grad = fd_gradient(&obj, &vec![0.0; dims], &probe, w).unwrap_or_else(|_| vec![f64::NAN; dims]);
        let g = DVector::from_iterator(dims, grad.iter().zip(&eps).map(|(g, e)| g * e));
        let norm = g.norm();
        let mut loss = current;
        if norm.is_finite() && norm > 0.0 && current.is_finite() {
            if let Some((s_prev, g_prev)) = last.take() {
                let y = &g - g_prev;
                let sy = s_prev.dot(&y);
                if sy > 1e-12 * s_prev.norm() * y.norm() {
                    let rho = 1.0 / sy;
                    let hm = h.take().unwrap_or_else(|| DMatrix::identity(dims, dims) * (sy / y.norm_squared()));
                    let i = DMatrix::<f64>::identity(dims, dims);
                    let left = &i - &s_prev * y.transpose() * rho;
                    let right = &i - &y * s_prev.transpose() * rho;
                    h = Some(left * hm * right + &s_prev * s_prev.transpose() * rho);
                }
            }
            // quasi-Newton direction when it descends, normalized gradient otherwise
            let (dir, mut s) = match &h {
                Some(hm) => {
                    let d = -(hm * &g);
                    if d.dot(&g) < 0.0 && d.iter().all(|v| v.is_finite()) {
                        (d, 1.0)
                    } else {
                        h = None;
                        (-&g / norm, step)
                    }
                }
                None => (-&g / norm, step),
            };
            let first = s;
            let base = params;
            for _ in 0..=config.max_backtracks {
                let x: Vec<f64> = dir.iter().zip(&eps).map(|(d, e)| s * d * e).collect();
                let candidate = retract(&params, &x);
                let trial = loss_at(&candidate, w);
                if trial < current {
                    params = candidate;
                    loss = trial;
                    if s == first {
                        // keep stretching while the loss keeps falling
                        for _ in 0..config.max_backtracks {
                            let s2 = s / config.backtrack_factor;
                            let x: Vec<f64> = dir.iter().zip(&eps).map(|(d, e)| s2 * d * e).collect();
                            let c2 = retract(&base, &x);
                            let t2 = loss_at(&c2, w);
                            if t2 < loss {
                                params = c2;
                                loss = t2;
                                s = s2;
                            } else {
                                break;
                            }
                        }
                    }
                    last = Some((&dir * s, g.clone()));
                    break;
                }
                s *= config.backtrack_factor;
            }
            if loss < current {
                widen = 1.0;
                if h.is_none() {
                    // grow after an immediate success, otherwise continue from the shrunk length
                    step = if s == first { s / config.backtrack_factor } else { s.max(1e-6) };
                }
            } else {
                // Outside the class region the rounded-cell lookup makes the loss
                // jump; a wider probe averages over the jumps.
                widen = (widen * 10.0).min(100.0);
                h = None;
                last = None;
            }
        }
        trace.push(TraceEntry { w, loss, params });
    }

    let final_loss = trace.last().map_or(f64::INFINITY, |e| e.loss);
    let mut result = CalibrationResult {
        params,
        final_loss,
        trace,
        status: CalibrationStatus::MaxIterations,
        failure_reason: None,
        n_elements: element_count(&params, &frames, joint),
        excluded_frames,
    };
    let (status, reason) = detect_failure(&result, config);
    result.status = status;
    result.failure_reason = reason;
    Ok(result)
}

/// Static extrinsic refinement; delay is held at 0 and velocities ignored.
pub fn calibrate_static(
    frames: &[FrameBundle],
    init: &CalibrationParams,
    config: &OptimizerConfig,
) -> Result<CalibrationResult, CalibrateError> {
    optimize(frames, init.with_delay(0.0), None, config, 6)
}

/// Joint extrinsic and delay estimation, started from and regularized towards
/// `static_result`.
pub fn calibrate_joint(
    frames: &[FrameBundle],
    static_result: &CalibrationParams,
    init_delay: f64,
    config: &OptimizerConfig,
) -> Result<CalibrationResult, CalibrateError> {
    config.validate()?;
    if frames.is_empty() {
        return Err(CalibrateError::NoFrames);
    }
    let mut speed = 0.0;
    for (i, f) in frames.iter().enumerate() {
        speed += f.velocity.ok_or(CalibrateError::MissingVelocity { frame: i })?.norm();
    }
    let anchor = static_result.with_delay(0.0);
    let init = static_result.with_delay(init_delay);
    if speed / (frames.len() as f64) < config.min_speed {
        let w = config.schedule.weight_at(0).expect("non-empty schedule");
        return Ok(CalibrationResult {
            params: init,
            final_loss: total_objective(&init, frames, Some(&anchor), config, w).unwrap_or(f64::INFINITY),
            trace: Vec::new(),
            status: CalibrationStatus::Failed,
            failure_reason: Some("zero excitation".into()),
            n_elements: element_count(&init, frames, true),
            excluded_frames: Vec::new(),
        });
    }
    optimize(frames, init, Some(&anchor), config, if config.optimize_delay { 7 } else { 6 })
}

/// Coarse delay initialization: evaluates the joint objective at the static
/// extrinsic over the grid `range.0, range.0 + step, ..., range.1` and returns
/// the delay with the lowest loss (the earliest on ties).
pub fn delay_grid_search(
    frames: &[FrameBundle],
    static_result: &CalibrationParams,
    range: (f64, f64),
    step: f64,
    config: &OptimizerConfig,
) -> Result<f64, CalibrateError> {
    if !(step > 0.0 && range.1 >= range.0) {
        return Err(CalibrateError::InvalidConfig(format!("delay grid {range:?} step {step}")));
    }
    if frames.is_empty() {
        return Err(CalibrateError::NoFrames);
    }
    for (i, f) in frames.iter().enumerate() {
        f.velocity.ok_or(CalibrateError::MissingVelocity { frame: i })?;
    }
    let w = config.schedule.weight_at(0).expect("non-empty schedule");
    let anchor = static_result.with_delay(0.0);
    let n = ((range.1 - range.0) / step + 1e-9).floor() as usize;
    let losses: Vec<f64> = (0..=n)
        .into_par_iter()
        .map(|k| {
            let p = static_result.with_delay(range.0 + k as f64 * step);
            total_objective(&p, frames, Some(&anchor), config, w).unwrap_or(f64::INFINITY)
        })
        .collect();
    let best = (0..=n).fold(0, |b, k| if losses[k] < losses[b] { k } else { b });
    if !losses[best].is_finite() {
        return Err(CalibrateError::AllFramesDegenerate);
    }
    Ok(range.0 + best as f64 * step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_schedule_boundaries() {
        let c = default_static_config();
        assert_eq!(c.schedule.total_iterations(), 60);
        for (l, w) in [(0, 20.0), (19, 20.0), (20, 1.0), (49, 1.0), (50, 0.02), (59, 0.02)] {
            assert_eq!(c.schedule.weight_at(l), Some(w), "iteration {l}");
        }
        assert_eq!(c.schedule.weight_at(60), None);
        assert_eq!(c.sample_rate, 0.02);
    }

    #[test]
    fn joint_defaults() {
        let c = default_joint_config();
        assert_eq!(c.schedule.segments(), &[(20, 5.0)]);
        assert_eq!(c.lambda1, 1e6);
        assert_eq!(c.lambda2, 1e9);
        assert_eq!(c.sample_rate, 0.02);
    }

    #[test]
    fn schedule_parse_and_validation() {
        let s = WeightSchedule::parse("20:20,30:1,10:0.02").unwrap();
        assert_eq!(s, default_static_config().schedule);
        assert_eq!(s.to_string(), "20:20,30:1,10:0.02");
        assert!(WeightSchedule::parse("0:1").is_err());
        assert!(WeightSchedule::parse("5:-1").is_err());
        assert!(WeightSchedule::parse("5").is_err());
        assert!(WeightSchedule::parse("5:0").is_ok());
    }

    #[test]
    fn config_key_value_round_trip() {
        let c = default_joint_config();
        assert_eq!(c.parse_key_value(&c.to_key_value()).unwrap(), c);
        let d = default_static_config().parse_key_value("# tweak\nlambda1 = 5\nschedule=3:2\n").unwrap();
        assert_eq!(d.lambda1, 5.0);
        assert_eq!(d.schedule.total_iterations(), 3);
        assert!(matches!(c.parse_key_value("bogus=1"), Err(CalibrateError::ConfigParse { line: 1, .. })));
        assert!(c.parse_key_value("backtrack_factor=1.5").is_err());
    }

    #[test]
    fn regularization_cases() {
        let s = CalibrationParams::new(Vector3::new(0.1, 0.2, -0.3), Vector3::new(0.1, 0.0, -0.2), 0.0);
        assert_eq!(regularization(&s, &s, 1e6, 1e9), 0.0);
        let t = CalibrationParams { translation: s.translation + Vector3::new(0.001, 0.0, 0.0), ..s };
        assert!((regularization(&t, &s, 1e6, 0.0) - 1.0).abs() < 1e-9);
        for theta in [1e-3, 0.1, 1.0, 3.0] {
            let axis = Vector3::new(0.3, -0.4, 0.5).normalize();
            let r = axis_angle_to_matrix(&(axis * theta)) * s.rotation();
            let p = CalibrationParams::new(matrix_to_axis_angle(&r), s.translation, 0.0);
            let chord = 2.0 * 2f64.sqrt() * (theta / 2.0).sin();
            // element-wise brute force on the matrices
            let m = p.rotation() * s.rotation().transpose();
            let mut brute = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    let d = m[(i, j)] - if i == j { 1.0 } else { 0.0 };
                    brute += d * d;
                }
            }
            let reg = regularization(&p, &s, 0.0, 1e9);
            assert!((reg - 1e9 * chord * chord).abs() <= 1e-6 * reg.max(1.0), "theta {theta}");
            assert!((reg - 1e9 * brute).abs() <= 1e-9 * reg.max(1.0));
        }
    }

    #[test]
    fn fd_gradient_of_quadratic() {
        let f = |x: &[f64], _w: f64| -> Result<f64, CalibrateError> { Ok(x.iter().map(|v| v * v).sum()) };
        let x = [0.3, -1.2, 2.0, 0.0, 5.0, -0.7, 0.01];
        let g = fd_gradient(&f, &x, &[1e-4, 1e-4, 1e-4, 1e-3, 1e-3, 1e-3, 1e-4], 1.0).unwrap();
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
        let flat = |_: &[f64], _w: f64| -> Result<f64, CalibrateError> { Ok(4.0) };
        assert_eq!(fd_gradient(&flat, &x[..6], &[1e-3; 6], 0.0).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn detect_failure_cases() {
        let p = CalibrationParams::new(Vector3::zeros(), Vector3::zeros(), 0.0);
        let mut r = CalibrationResult {
            params: p,
            final_loss: 0.0,
            trace: vec![TraceEntry { w: 1.0, loss: 0.0, params: p }],
            status: CalibrationStatus::MaxIterations,
            failure_reason: None,
            n_elements: 100,
            excluded_frames: vec![],
        };
        let c = default_static_config();
        assert_eq!(detect_failure(&r, &c).0, CalibrationStatus::Converged);
        r.trace.push(TraceEntry { w: 1.0, loss: f64::NAN, params: p });
        assert_eq!(detect_failure(&r, &c).0, CalibrationStatus::Failed);
        r.trace.pop();
        r.final_loss = 100.0 * 51.0;
        r.trace[0].loss = r.final_loss;
        assert_eq!(detect_failure(&r, &c).0, CalibrationStatus::Failed);
        r.final_loss = 100.0 * 10.0;
        r.trace = vec![TraceEntry { w: 1.0, loss: 2000.0, params: p }, TraceEntry { w: 1.0, loss: 1000.0, params: p }];
        assert_eq!(detect_failure(&r, &c).0, CalibrationStatus::MaxIterations);
    }

    #[test]
    fn retract_zero_is_identity() {
        let p = CalibrationParams::new(Vector3::new(0.5, -0.2, 1.0), Vector3::new(1.0, 2.0, 3.0), 0.25);
        let q = retract(&p, &[0.0; 7]);
        assert!((q.rotation() - p.rotation()).norm() < 1e-15);
        assert_eq!(q.translation, p.translation);
        assert_eq!(q.delay, p.delay);
    }
}
