use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use cfs_core::denoiser::model_file;
use cfs_core::sampler::cfs_inpaint;
use cfs_core::{Denoiser, Field, MaskField, NoiseSchedule, Respaced, Rng, SamplerConfig, StepTrace, TinyDenoiser};

use crate::config::RunConfig;

/// Models and sampling schedule for one configuration. Models are
/// evaluated at the original training levels of the respaced schedule.
pub struct Pipeline<'a> {
    pub sampler: SamplerConfig,
    schedule: NoiseSchedule,
    fine: Respaced<&'a dyn Denoiser>,
    coarse: Respaced<&'a dyn Denoiser>,
}

pub struct Inpainted {
    pub image: Field,
    pub trace: StepTrace,
    /// Monotonic span around the sampling loop only.
    pub wall_clock_s: f64,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &RunConfig, fine: &'a dyn Denoiser, coarse: Option<&'a dyn Denoiser>) -> Result<Self> {
        let respacing = cfg.sampling()?;
        let coarse = coarse.unwrap_or(fine);
        Ok(Self {
            sampler: cfg.sampler,
            schedule: respacing.schedule,
            fine: Respaced::new(fine, respacing.timesteps.clone()),
            coarse: Respaced::new(coarse, respacing.timesteps),
        })
    }

    /// Same models and schedule with different sampler settings. `Tc` must
    /// not change since it fixes the respacing.
    pub fn with_sampler(&self, sampler: SamplerConfig) -> Result<Pipeline<'a>> {
        if sampler.t_c != self.sampler.t_c {
            bail!("Tc is fixed by the respaced schedule");
        }
        sampler.validate(&self.schedule)?;
        Ok(Pipeline {
            sampler,
            schedule: self.schedule.clone(),
            fine: self.fine.clone(),
            coarse: self.coarse.clone(),
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn param_count(&self) -> usize {
        self.fine.param_count()
    }

    pub fn inpaint(&self, known: &Field, mask: &MaskField, rng: &mut Rng) -> Result<Inpainted> {
        let start = Instant::now();
        let (image, trace) = cfs_inpaint(&self.schedule, &self.coarse, &self.fine, known, mask, &self.sampler, rng)?;
        Ok(Inpainted {
            image,
            trace,
            wall_clock_s: start.elapsed().as_secs_f64(),
        })
    }
}

/// Loaded model files: the refinement model and an optional coarse model.
pub struct Models {
    pub fine: TinyDenoiser,
    pub coarse: Option<TinyDenoiser>,
}

impl Models {
    pub fn load(fine: &Path, coarse: Option<&Path>) -> Result<Self> {
        let load = |p: &Path| model_file::load(p).with_context(|| format!("loading model {}", p.display()));
        Ok(Self {
            fine: load(fine)?,
            coarse: coarse.map(load).transpose()?,
        })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let Some(fine) = &cfg.model else {
            bail!("no model given");
        };
        Self::load(fine, cfg.coarse_model.as_deref())
    }

    pub fn pipeline(&self, cfg: &RunConfig) -> Result<Pipeline<'_>> {
        Pipeline::new(cfg, &self.fine, self.coarse.as_ref().map(|m| m as &dyn Denoiser))
    }
}
