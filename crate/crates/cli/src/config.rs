use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cfs_core::schedule::Respacing;
use cfs_core::{SamplerConfig, ScheduleSpec};
use serde::{Deserialize, Serialize};

/// Everything one run needs: sampler settings, the training schedule the
/// models were fitted on, and the paths of models and corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub sampler: SamplerConfig,
    pub schedule: ScheduleSpec,
    pub model: Option<PathBuf>,
    pub coarse_model: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            schedule: ScheduleSpec::default(),
            model: None,
            coarse_model: None,
            images: None,
            masks: None,
            seed: 0,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).context("parsing run config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    /// The training schedule respaced to `Tc` levels, checked against the
    /// sampler settings.
    pub fn sampling(&self) -> Result<Respacing> {
        let train = self.schedule.build()?;
        let respaced = train.respace(self.sampler.t_c)?;
        self.sampler.validate(&respaced.schedule)?;
        Ok(respaced)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampling().map(|_| ())
    }
}
