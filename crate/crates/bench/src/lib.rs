//! Fixtures shared by the criterion benches.

use cfs_core::denoiser::toy::toy_image;
use cfs_core::denoiser::TinyConfig;
use cfs_core::masks::generate_mask;
use cfs_core::schedule::Respacing;
use cfs_core::{Field, MaskField, MaskKind, Rng, ScheduleSpec, TinyDenoiser};

/// A randomly initialised denoiser with a nonzero output head.
pub fn tiny_model(seed: u64) -> TinyDenoiser {
    let mut model = TinyDenoiser::new(TinyConfig::default(), &mut Rng::new(seed)).expect("valid config");
    let mut rng = Rng::new(seed ^ 1);
    for p in model.params_mut() {
        *p += rng.uniform_range(-0.02, 0.02) as f32;
    }
    model
}

/// A toy image with a half mask.
pub fn problem(res: usize) -> (Field, MaskField) {
    let image = toy_image(0, 0, res, res, 1).expect("valid size");
    let mask = generate_mask(MaskKind::Half, res, res, &mut Rng::new(0)).expect("valid size");
    (image, mask)
}

/// The default training schedule respaced to `levels`.
pub fn sampling(levels: usize) -> Respacing {
    ScheduleSpec::default()
        .build()
        .and_then(|s| s.respace(levels))
        .expect("valid schedule")
}
