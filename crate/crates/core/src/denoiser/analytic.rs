use crate::error::{Error, Result};
use crate::field::Field;
use crate::schedule::NoiseSchedule;

use super::Denoiser;

/// Exact posterior-mean noise predictor for data `x_0 ~ N(mu, sigma0_sq I)`.
///
/// With `a = alpha_bar_t`, the posterior mean of the clean image is
/// `mu + sqrt(a) sigma0_sq / (a sigma0_sq + 1 - a) * (x_t - sqrt(a) mu)` and
/// the noise estimate follows from the forward marginal.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianDenoiser {
    mu: Field,
    sigma0_sq: f64,
    schedule: NoiseSchedule,
}

impl AnalyticGaussianDenoiser {
    pub fn new(mu: Field, sigma0_sq: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(sigma0_sq > 0.0) || !sigma0_sq.is_finite() {
            return Err(Error::InvalidRange(format!("sigma0_sq must be > 0, got {sigma0_sq}")));
        }
        if !mu.is_finite() {
            return Err(Error::InvalidRange("mu must be finite".into()));
        }
        Ok(Self {
            mu,
            sigma0_sq,
            schedule,
        })
    }

    /// Spatially constant mean.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        mean: f64,
        sigma0_sq: f64,
        schedule: NoiseSchedule,
        h: usize,
        w: usize,
        c: usize,
    ) -> Result<Self> {
        Self::new(Field::filled(h, w, c, mean)?, sigma0_sq, schedule)
    }

    pub fn mu(&self) -> &Field {
        &self.mu
    }

    pub fn sigma0_sq(&self) -> f64 {
        self.sigma0_sq
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Posterior mean of `x_0` given `x_t`.
    pub fn predict_x0(&self, x_t: &Field, t: usize) -> Result<Field> {
        self.schedule.beta(t)?;
        self.mu.same_shape(x_t)?;
        let a = self.schedule.alpha_bar(t)?;
        let sa = a.sqrt();
        let gain = sa * self.sigma0_sq / (a * self.sigma0_sq + 1.0 - a);
        x_t.zip_map(&self.mu, |x, m| m + gain * (x - sa * m))
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn predict(&self, x_t: &Field, t: usize) -> Result<Field> {
        let x0 = self.predict_x0(x_t, t)?;
        let a = self.schedule.alpha_bar(t)?;
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        x_t.zip_map(&x0, |x, x0| (x - sa * x0) / sn)
    }

    fn supports(&self, h: usize, w: usize, c: usize) -> bool {
        self.mu.shape() == (h, w, c)
    }
}
