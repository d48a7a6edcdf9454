//! P2-weighted training of [`TinyNet`] with Adam and global-norm clipping.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, Rng};
use crate::sampler::forward_diffuse;
use crate::schedule::{NoiseSchedule, P2Params};

use super::layers::Real;
use super::tiny::{field_to_chw, TinyNet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: usize,
    /// Size of the fixed evaluation set scored at every checkpoint.
    pub eval_samples: usize,
    pub p2: P2Params,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 16,
            lr: 1e-4,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 100,
            eval_samples: 64,
            p2: P2Params::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    /// Mean P2-weighted loss on the fixed evaluation set.
    pub loss: f64,
    /// Mean P2-weighted training loss since the previous checkpoint.
    pub train_loss: Option<f64>,
    pub lr: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub param_count: usize,
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.checkpoints.first().map_or(f64::NAN, |c| c.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.checkpoints.last().map_or(f64::NAN, |c| c.loss)
    }
}

struct Sample {
    x_t: Vec<f32>,
    eps: Vec<f32>,
    t: usize,
    weight: f64,
}

fn draw_sample(
    data: &[Field],
    sched: &NoiseSchedule,
    p2: P2Params,
    rng: &mut Rng,
) -> Result<Sample> {
    let x0 = &data[rng.int_inclusive(0, data.len() - 1)];
    let t = rng.int_inclusive(1, sched.steps());
    let (h, w, c) = x0.shape();
    let eps = Field::gaussian(rng, h, w, c)?;
    let x_t = forward_diffuse(sched, x0, t, &eps)?;
    Ok(Sample {
        x_t: field_to_chw(&x_t),
        eps: field_to_chw(&eps),
        t,
        weight: sched.p2_weight(t, p2)?,
    })
}

/// P2-weighted loss `p2_weight(t) * mean((eps - eps_theta(x_t, t))^2)` for
/// one clean image and noise draw.
pub fn p2_loss<R: Real>(
    model: &TinyNet<R>,
    sched: &NoiseSchedule,
    p2: P2Params,
    x0: &Field,
    t: usize,
    eps: &Field,
) -> Result<f64> {
    let x_t = forward_diffuse(sched, x0, t, eps)?;
    let (h, w, _) = x0.shape();
    model.loss(
        &field_to_chw::<R>(&x_t),
        &field_to_chw::<R>(eps),
        h,
        w,
        t as f64,
        sched.p2_weight(t, p2)?,
    )
}

fn eval_loss(model: &TinyNet<f32>, set: &[Sample], h: usize, w: usize) -> Result<f64> {
    let losses: Result<Vec<f64>> = set
        .par_iter()
        .map(|s| model.loss(&s.x_t, &s.eps, h, w, s.t as f64, s.weight))
        .collect();
    Ok(losses?.iter().sum::<f64>() / set.len() as f64)
}

/// Optimises `E_{t, x0, eps}[p2_weight(t) * |eps - eps_theta(x_t, t)|^2]` with
/// `t` uniform on `1..=T`, updating `model` in place.
///
/// Per-sample gradients may be computed in parallel; they are always summed
/// in batch order, so a fixed seed gives bit-identical weights.
pub fn train_p2(
    model: &mut TinyNet<f32>,
    data: &[Field],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.steps == 0 || cfg.batch == 0 || cfg.checkpoint_every == 0 || cfg.eval_samples == 0 {
        return Err(Error::Config(
            "steps, batch, checkpoint_every and eval_samples must be positive".into(),
        ));
    }
    let (h, w, c) = data[0].shape();
    if data.iter().any(|d| d.shape() != (h, w, c)) {
        return Err(Error::Config("training images must share one shape".into()));
    }
    if !model.supports_shape(h, w, c) {
        return Err(Error::UnsupportedShape { h, w, c });
    }

    let start = Instant::now();
    let mut eval_rng = rng.fork();
    let eval_set: Vec<Sample> = (0..cfg.eval_samples)
        .map(|_| draw_sample(data, sched, cfg.p2, &mut eval_rng))
        .collect::<Result<_>>()?;

    let n = model.num_params();
    let mut m = vec![0f32; n];
    let mut v = vec![0f32; n];
    let mut checkpoints = vec![Checkpoint {
        step: 0,
        loss: eval_loss(model, &eval_set, h, w)?,
        train_loss: None,
        lr: cfg.lr,
        wall_clock_s: start.elapsed().as_secs_f64(),
    }];
    log::info!("step 0: eval loss {:.5}", checkpoints[0].loss);
    let mut window = (0.0, 0usize);
    let scale = 1.0 / cfg.batch as f64;

    for step in 1..=cfg.steps {
        let batch: Vec<Sample> = (0..cfg.batch)
            .map(|_| draw_sample(data, sched, cfg.p2, rng))
            .collect::<Result<_>>()?;
        let net: &TinyNet<f32> = model;
        let per_item: Vec<Result<(f64, Vec<f32>)>> = batch
            .par_iter()
            .map(|s| {
                let mut g = vec![0f32; n];
                let loss = net.loss_and_grad(&s.x_t, &s.eps, h, w, s.t as f64, s.weight, scale, &mut g)?;
                Ok((loss, g))
            })
            .collect();
        let mut grad = vec![0f32; n];
        let mut batch_loss = 0.0;
        for (s, item) in batch.iter().zip(per_item) {
            let (loss, g) = item?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    t: s.t,
                    weight: s.weight,
                });
            }
            batch_loss += loss * scale;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
        }

        let norm = grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                t: 0,
                weight: norm,
            });
        }
        let clip = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 } as f32;

        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let bc1 = 1.0 - cfg.beta1.powi(step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(step as i32);
        let step_size = (cfg.lr * bc2.sqrt() / bc1) as f32;
        let eps = (cfg.adam_eps * bc2.sqrt()) as f32;
        for (((p, g), m), v) in model.params_mut().iter_mut().zip(&grad).zip(&mut m).zip(&mut v) {
            let g = g * clip;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step_size * *m / (v.sqrt() + eps);
        }

        window.0 += batch_loss;
        window.1 += 1;
        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            let cp = Checkpoint {
                step,
                loss: eval_loss(model, &eval_set, h, w)?,
                train_loss: Some(window.0 / window.1 as f64),
                lr: cfg.lr,
                wall_clock_s: start.elapsed().as_secs_f64(),
            };
            if !cp.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    t: 0,
                    weight: cp.loss,
                });
            }
            log::info!(
                "step {step}: eval loss {:.5}, train loss {:.5}, {:.1}s",
                cp.loss,
                window.0 / window.1 as f64,
                cp.wall_clock_s
            );
            checkpoints.push(cp);
            window = (0.0, 0);
        }
    }
    Ok(TrainReport {
        param_count: n,
        checkpoints,
    })
}
