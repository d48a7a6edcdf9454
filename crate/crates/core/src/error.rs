use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("timestep {t} out of range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },

    #[error("invalid dimensions: {0}")]
    Dimension(String),

    #[error("unsupported shape {h}x{w}x{c} for this denoiser")]
    UnsupportedShape { h: usize, w: usize, c: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss at step {step} (t = {t}, weight = {weight})")]
    NonFiniteLoss { step: usize, t: usize, weight: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
