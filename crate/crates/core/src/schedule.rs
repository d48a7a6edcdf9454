//! Noise schedules and the perception-prioritized (P2) loss weights.
//!
//! Timesteps are 1-based: level `t` in `1..=T` carries `beta_t`, and
//! `alpha_bar` is indexed from 0 with `alpha_bar[0] = 1` meaning clean data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serializable description of a schedule, as it appears in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ScheduleSpec {
    Linear {
        #[serde(rename = "T")]
        steps: usize,
        beta_start: f64,
        beta_end: f64,
    },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Linear {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match *self {
            ScheduleSpec::Linear {
                steps,
                beta_start,
                beta_end,
            } => NoiseSchedule::linear(steps, beta_start, beta_end),
        }
    }
}

/// Precomputed `beta`, `alpha` and cumulative `alpha_bar` tables.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    // index 0 is unused padding so that `beta[t]` reads naturally
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation of `beta` from `beta_start` at `t = 1` to
    /// `beta_end` at `t = steps`. A single-step schedule uses `beta_start`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas = (1..=steps).map(|t| {
            if steps == 1 {
                beta_start
            } else {
                let frac = (t - 1) as f64 / (steps - 1) as f64;
                beta_start + frac * (beta_end - beta_start)
            }
        });
        Self::from_betas(betas.collect())
    }

    /// Builds a schedule from `beta_1..beta_T`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidRange(format!("beta {b} outside (0, 1)")));
        }
        let mut beta = Vec::with_capacity(betas.len() + 1);
        let mut alpha = Vec::with_capacity(betas.len() + 1);
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        beta.push(0.0);
        alpha.push(1.0);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in betas {
            let a = 1.0 - b;
            acc *= a;
            beta.push(b);
            alpha.push(a);
            alpha_bar.push(acc);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// Builds a schedule directly from a cumulative table
    /// `alpha_bar_1..alpha_bar_T`, which must be strictly decreasing in (0, 1).
    fn from_alpha_bar(alpha_bars: &[f64]) -> Result<Self> {
        let mut beta = vec![0.0];
        let mut alpha = vec![1.0];
        let mut alpha_bar = vec![1.0];
        for &ab in alpha_bars {
            let prev = *alpha_bar.last().unwrap();
            if !(ab > 0.0 && ab < prev) {
                return Err(Error::InvalidRange(format!(
                    "alpha_bar must strictly decrease, got {ab} after {prev}"
                )));
            }
            let a = ab / prev;
            beta.push(1.0 - a);
            alpha.push(a);
            alpha_bar.push(ab);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    fn check_level(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.beta[t])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha[t])
    }

    /// Cumulative product; valid for `0..=T` with `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_level(t)?;
        Ok(self.alpha_bar[t])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta[1..]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Signal-to-noise ratio of `x_t`: `alpha_bar_t / (1 - alpha_bar_t)`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        let ab = self.alpha_bar[t];
        Ok(ab / (1.0 - ab))
    }

    /// The default ε-objective weight `(1 - beta_t)(1 - alpha_bar_t) / beta_t`.
    pub fn lambda_simple(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        let b = self.beta[t];
        Ok((1.0 - b) * (1.0 - self.alpha_bar[t]) / b)
    }

    /// P2 weight `lambda_simple(t) / (k_shift + snr(t))^gamma`.
    pub fn p2_weight(&self, t: usize, p: P2Params) -> Result<f64> {
        let lambda = self.lambda_simple(t)?;
        if p.gamma == 0.0 {
            return Ok(lambda);
        }
        Ok(lambda / (p.k_shift + self.snr(t)?).powf(p.gamma))
    }

    /// Sub-samples the schedule to `count` evenly spaced levels, keeping the
    /// cumulative `alpha_bar` of the chosen levels. Level `j` of the result
    /// corresponds to level `timesteps[j]` of `self`; the first kept level is
    /// 1 and the last is `T`.
    pub fn respace(&self, count: usize) -> Result<Respacing> {
        let steps = self.steps();
        if count == 0 || count > steps {
            return Err(Error::InvalidRange(format!(
                "cannot respace {steps} steps to {count}"
            )));
        }
        let mut timesteps = vec![0usize];
        if count == 1 {
            timesteps.push(steps);
        } else {
            let stride = (steps - 1) as f64 / (count - 1) as f64;
            for j in 0..count {
                timesteps.push((j as f64 * stride).round() as usize + 1);
            }
        }
        let kept: Vec<f64> = timesteps[1..].iter().map(|&t| self.alpha_bar[t]).collect();
        Ok(Respacing {
            schedule: Self::from_alpha_bar(&kept)?,
            timesteps,
        })
    }
}

/// A sub-sampled schedule plus the map back to the original levels.
#[derive(Debug, Clone)]
pub struct Respacing {
    pub schedule: NoiseSchedule,
    /// `timesteps[j]` is the original level of respaced level `j`.
    pub timesteps: Vec<usize>,
}

/// Parameters of the P2 weighting: the SNR shift and the exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct P2Params {
    pub k_shift: f64,
    pub gamma: f64,
}

impl Default for P2Params {
    fn default() -> Self {
        Self {
            k_shift: 1.0,
            gamma: 1.0,
        }
    }
}

impl P2Params {
    pub fn new(k_shift: f64, gamma: f64) -> Result<Self> {
        if !(k_shift > 0.0) || !(gamma >= 0.0) {
            return Err(Error::InvalidRange(format!(
                "need k_shift > 0 and gamma >= 0, got {k_shift} and {gamma}"
            )));
        }
        Ok(Self { k_shift, gamma })
    }
}
