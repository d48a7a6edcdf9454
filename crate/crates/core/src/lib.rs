//! Diffusion-model image inpainting with three speed-up strategies:
//! a light-weight denoiser trained with perception-prioritized loss
//! weighting, skip-step DDIM sampling, and a coarse-to-fine two-stage
//! sampling pipeline.
//!
//! The crate is organised bottom-up:
//!
//! * [`schedule`] builds the noise schedule and the loss weights.
//! * [`field`] holds the dense image/noise grids, masks and the seeded RNG.
//! * [`io`] reads and writes PGM/PPM images and raw float dumps.
//! * [`masks`] generates the six evaluation mask families.
//! * [`denoiser`] provides the noise-prediction models and the trainer.
//! * [`sampler`] contains the reverse process and the inpainting pipelines.
//! * [`metrics`] computes SSIM, relative L1 and PSNR.

pub mod denoiser;
pub mod error;
pub mod field;
pub mod io;
pub mod masks;
pub mod metrics;
pub mod sampler;
pub mod schedule;

pub use denoiser::{AnalyticGaussianDenoiser, Denoiser, Respaced, TinyDenoiser};
pub use error::{Error, Result};
pub use field::{Field, MaskField, Rng};
pub use masks::MaskKind;
pub use metrics::MetricReport;
pub use sampler::{EvalCost, RenoiseMode, SamplerConfig, StageParams, StepTrace};
pub use schedule::{NoiseSchedule, P2Params, ScheduleSpec};
