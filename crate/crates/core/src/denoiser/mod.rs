//! Noise-prediction models: the closed-form Gaussian oracle, the trainable
//! light-weight network, its P2-weighted trainer and its file format.

mod analytic;
pub mod layers;
pub mod model_file;
mod tiny;
pub mod toy;
pub mod train;

pub use analytic::AnalyticGaussianDenoiser;
pub use tiny::{chw_to_field, field_to_chw, ParamEntry, TinyConfig, TinyDenoiser, TinyNet};
pub use train::{train_p2, Checkpoint, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::field::Field;

/// An ε-prediction model `eps_theta(x_t, t)`.
///
/// Implementations must be pure: identical inputs give bit-identical outputs
/// of the input's shape.
pub trait Denoiser: Sync {
    fn predict(&self, x_t: &Field, t: usize) -> Result<Field>;

    /// Whether `h x w x c` inputs are accepted.
    fn supports(&self, h: usize, w: usize, c: usize) -> bool;

    fn param_count(&self) -> usize {
        0
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict(&self, x_t: &Field, t: usize) -> Result<Field> {
        (**self).predict(x_t, t)
    }

    fn supports(&self, h: usize, w: usize, c: usize) -> bool {
        (**self).supports(h, w, c)
    }

    fn param_count(&self) -> usize {
        (**self).param_count()
    }
}

/// Runs a model trained on a long schedule at the levels of a respaced one:
/// level `t` is forwarded as original level `timesteps[t]`.
#[derive(Debug, Clone)]
pub struct Respaced<D> {
    inner: D,
    timesteps: Vec<usize>,
}

impl<D: Denoiser> Respaced<D> {
    pub fn new(inner: D, timesteps: Vec<usize>) -> Self {
        Self { inner, timesteps }
    }
}

impl<D: Denoiser> Denoiser for Respaced<D> {
    fn predict(&self, x_t: &Field, t: usize) -> Result<Field> {
        let original = *self
            .timesteps
            .get(t)
            .filter(|_| t > 0)
            .ok_or(Error::TimestepOutOfRange {
                t,
                max: self.timesteps.len().saturating_sub(1),
            })?;
        self.inner.predict(x_t, original)
    }

    fn supports(&self, h: usize, w: usize, c: usize) -> bool {
        self.inner.supports(h, w, c)
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }
}
