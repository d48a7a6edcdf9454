use anyhow::Result;
use cfs_core::denoiser::toy::toy_dataset;
use cfs_core::denoiser::{train_p2, TinyConfig, TinyNet, TrainConfig, TrainReport};
use cfs_core::{Rng, ScheduleSpec, TinyDenoiser};
use serde::{Deserialize, Serialize};

use crate::REPORT_VERSION;

/// Training on the procedural toy set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyTraining {
    pub train: TrainConfig,
    pub schedule: ScheduleSpec,
    pub images: usize,
    pub resolution: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for ToyTraining {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            schedule: ScheduleSpec::default(),
            images: 512,
            resolution: 32,
            channels: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingOutput {
    pub version: u32,
    pub setup: ToyTraining,
    pub report: TrainReport,
}

/// Item indices `0..images` are the training set; held-out images for
/// evaluation should use indices from `images` upward.
pub fn train_toy(setup: &ToyTraining) -> Result<(TinyDenoiser, TrainingOutput)> {
    let data = toy_dataset(setup.seed, setup.images, setup.resolution, setup.resolution, setup.channels)?;
    let sched = setup.schedule.build()?;
    let mut rng = Rng::derive(setup.seed, u64::MAX);
    let mut model = TinyNet::new(TinyConfig::with_channels(setup.channels), &mut rng)?;
    let report = train_p2(&mut model, &data, &sched, &setup.train, &mut rng)?;
    Ok((
        model,
        TrainingOutput {
            version: REPORT_VERSION,
            setup: *setup,
            report,
        },
    ))
}
