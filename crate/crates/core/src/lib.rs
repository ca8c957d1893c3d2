//! Joint LIDAR-camera extrinsic and time-delay calibration by aligning
//! semantic point clouds with semantic image masks in both directions.
//!
//! The pipeline: load labelled clouds and masks ([`semantic_io`]), build
//! nearest-pixel indices ([`alignment`]), refine the extrinsic on static data
//! and then extrinsic plus delay on moving data ([`calibrate`]), with ego
//! velocity supplied directly or recovered from two-view geometry
//! ([`odometry`]). [`synth`] builds scenes with known ground truth.

pub mod alignment;
pub mod calibrate;
pub mod geometry;
pub mod metrics;
pub mod odometry;
pub mod report;
pub mod semantic_io;
pub mod synth;

pub use alignment::{AlignmentError, NearestPixelIndex, ProjectedSet, SampledPixels};
pub use calibrate::{
    calibrate_joint, calibrate_static, default_joint_config, default_static_config, delay_grid_search, CalibrateError,
    CalibrationResult, CalibrationStatus, FrameBundle, OptimizerConfig, WeightSchedule,
};
pub use geometry::{CalibrationParams, CameraIntrinsics, GeometryError, RigidTransform};
pub use metrics::CalibrationError;
pub use odometry::{OdometryError, VelocityEstimate};
pub use report::{GroundTruthFile, ReportError, ResultFile};
pub use semantic_io::{FeatureCorrespondences, LoadError, SemanticMask, SemanticPointCloud};
pub use synth::{SceneBundle, SceneConfig, SynthError};
