//! Fixtures shared by the benchmarks.

use lcsync::synth::{generate_scene, perturb_params};
use lcsync::{CalibrationParams, FrameBundle, SceneBundle, SceneConfig};

/// A default synthetic scene, its frame bundle at `sample_rate` and a
/// perturbed starting point.
pub fn fixture(seed: u64, sample_rate: f64) -> (SceneBundle, FrameBundle, CalibrationParams) {
    let c = SceneConfig { seed, ..Default::default() };
    let s = generate_scene(&c).expect("default scene generates");
    let frame = FrameBundle::new(&s.cloud, &s.mask, c.cloud_class, c.mask_class as u32, s.intrinsics, None, sample_rate, seed)
        .expect("scene mask has the class");
    let init = perturb_params(&s.gt, 0.1, 10.0, 1000 + seed);
    (s, frame, init)
}
