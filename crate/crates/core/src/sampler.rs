//! Reverse-process machinery: forward diffusion, DDPM and DDIM steps, the
//! conditioned denoising and resampling modules, denoise blocks, and the
//! single-stage and coarse-to-fine inpainting pipelines.
//!
//! All timesteps here are levels of the *sampling* schedule passed in, which
//! is usually a respaced copy of the training schedule.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::field::{bilinear_resize, composite, Field, MaskField, Rng};
use crate::schedule::NoiseSchedule;

/// How a CRM lifts `x_t` to level `t + k*s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenoiseMode {
    /// `N(sqrt(abar_{t+ks} / abar_t) x_t, 1 - abar_{t+ks} / abar_t)`.
    #[default]
    Jump,
    /// `N(sqrt(abar_{t+ks}) x_t, 1 - abar_{t+ks})`, treating `x_t` as clean.
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    #[serde(rename = "Tc")]
    pub t_c: usize,
    #[serde(rename = "Tf")]
    pub t_f: usize,
    pub mc: usize,
    pub mf: usize,
    pub nc: usize,
    pub nf: usize,
    pub s: usize,
    /// CDMs inside one CRM.
    pub k: usize,
    pub coarse_res: usize,
    pub fine_res: usize,
    pub eta: f64,
    pub renoise_mode: RenoiseMode,
    /// Two-stage sampling. When false only the coarse-stage parameters are
    /// used, as a single stage at `fine_res`.
    pub cfs: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            t_c: 250,
            t_f: 75,
            mc: 3,
            mf: 2,
            nc: 8,
            nf: 10,
            s: 5,
            k: 2,
            coarse_res: 64,
            fine_res: 256,
            eta: 0.0,
            renoise_mode: RenoiseMode::Jump,
            cfs: true,
        }
    }
}

/// Parameters of one sampling stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    /// Starting level.
    pub steps: usize,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub s: usize,
    pub eta: f64,
    pub renoise_mode: RenoiseMode,
}

impl StageParams {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > sched.steps() {
            return Err(Error::Config(format!(
                "stage start {} outside 1..={}",
                self.steps,
                sched.steps()
            )));
        }
        if self.s == 0 || self.m == 0 || self.k == 0 {
            return Err(Error::Config("s, m and k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        // the highest CRM renoise target is reached after the first block
        let peak = self.steps.saturating_sub(self.m * self.s) + self.k * self.s;
        if self.n > 0 && peak > sched.steps() {
            return Err(Error::Config(format!(
                "CRM renoise target {peak} exceeds T = {}",
                sched.steps()
            )));
        }
        Ok(())
    }

    /// Denoiser evaluations of one stage: `ceil(T/s)` CDMs grouped into
    /// `ceil(steps/m)` blocks, each followed by `n` CRMs of `k` CDMs.
    pub fn evals(&self) -> usize {
        let cdms = self.steps.div_ceil(self.s);
        cdms + cdms.div_ceil(self.m) * self.n * self.k
    }
}

impl SamplerConfig {
    pub fn coarse_stage(&self) -> StageParams {
        StageParams {
            steps: self.t_c,
            m: self.mc,
            n: self.nc,
            k: self.k,
            s: self.s,
            eta: self.eta,
            renoise_mode: self.renoise_mode,
        }
    }

    pub fn fine_stage(&self) -> StageParams {
        StageParams {
            steps: self.t_f,
            m: self.mf,
            n: self.nf,
            ..self.coarse_stage()
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        self.coarse_stage().validate(sched)?;
        if self.fine_res == 0 || self.coarse_res == 0 {
            return Err(Error::Config("resolutions must be positive".into()));
        }
        if self.cfs {
            if self.t_f == 0 || self.t_f > self.t_c {
                return Err(Error::Config(format!(
                    "Tf = {} must lie in 1..=Tc = {}",
                    self.t_f, self.t_c
                )));
            }
            self.fine_stage().validate(sched)?;
            if self.coarse_res > self.fine_res || self.fine_res % self.coarse_res != 0 {
                return Err(Error::Config(format!(
                    "coarse_res {} must divide fine_res {}",
                    self.coarse_res, self.fine_res
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    /// One conditioned DDIM step; one denoiser evaluation.
    Cdm,
    /// CRM noise-up, no evaluation.
    Renoise,
    /// Coarse-to-fine hand-off: upsample and diffuse to `Tf`.
    Diffuse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceOp {
    pub kind: OpKind,
    pub t_before: usize,
    pub t_after: usize,
    pub resolution: usize,
    pub evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub resolution: usize,
    pub t_start: usize,
    pub evals: usize,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub ops: Vec<TraceOp>,
    pub stages: Vec<StageSummary>,
}

impl StepTrace {
    pub fn total_evals(&self) -> usize {
        self.ops.iter().map(|o| o.evals).sum()
    }

    pub fn stage_evals(&self, name: &str) -> Option<usize> {
        self.stages.iter().find(|s| s.name == name).map(|s| s.evals)
    }

    /// Evaluations weighted by `(resolution / fine_res)^2`.
    pub fn weighted_evals(&self, fine_res: usize) -> f64 {
        self.ops
            .iter()
            .map(|o| o.evals as f64 * (o.resolution as f64 / fine_res as f64).powi(2))
            .sum()
    }

    fn push(&mut self, kind: OpKind, t_before: usize, t_after: usize, resolution: usize) {
        self.ops.push(TraceOp {
            kind,
            t_before,
            t_after,
            resolution,
            evals: usize::from(kind == OpKind::Cdm),
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub name: String,
    pub resolution: usize,
    pub evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCost {
    pub stages: Vec<StageCost>,
    /// Fine-resolution-equivalent evaluations.
    pub weighted: f64,
}

impl EvalCost {
    pub fn total(&self) -> usize {
        self.stages.iter().map(|s| s.evals).sum()
    }

    pub fn stage(&self, name: &str) -> Option<usize> {
        self.stages.iter().find(|s| s.name == name).map(|s| s.evals)
    }
}

/// Predicted evaluation counts for `cfg`, identical to what a run records.
pub fn count_evals(cfg: &SamplerConfig) -> EvalCost {
    let mut stages = Vec::new();
    if cfg.cfs {
        stages.push(StageCost {
            name: "coarse".into(),
            resolution: cfg.coarse_res,
            evals: cfg.coarse_stage().evals(),
        });
        stages.push(StageCost {
            name: "fine".into(),
            resolution: cfg.fine_res,
            evals: cfg.fine_stage().evals(),
        });
    } else {
        stages.push(StageCost {
            name: "single".into(),
            resolution: cfg.fine_res,
            evals: cfg.coarse_stage().evals(),
        });
    }
    let weighted = stages
        .iter()
        .map(|s| s.evals as f64 * (s.resolution as f64 / cfg.fine_res as f64).powi(2))
        .sum();
    EvalCost { stages, weighted }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_diffuse(sched: &NoiseSchedule, x0: &Field, t: usize, eps: &Field) -> Result<Field> {
    let ab = sched.alpha_bar(t)?;
    if t == 0 {
        x0.same_shape(eps)?;
        return Ok(x0.clone());
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

fn predict(model: &dyn Denoiser, x: &Field, t: usize) -> Result<Field> {
    let eps = model.predict(x, t)?;
    x.same_shape(&eps)?;
    Ok(eps)
}

/// Ancestral step `t -> t-1` with fixed variance `beta_t (1 - abar_{t-1}) / (1 - abar_t)`.
/// No noise is drawn at `t = 1`.
pub fn ddpm_step(
    sched: &NoiseSchedule,
    model: &dyn Denoiser,
    x_t: &Field,
    t: usize,
    rng: &mut Rng,
) -> Result<Field> {
    if t == 0 {
        return Err(Error::TimestepOutOfRange {
            t,
            max: sched.steps(),
        });
    }
    let (beta, alpha, ab) = (sched.beta(t)?, sched.alpha(t)?, sched.alpha_bar(t)?);
    let eps = predict(model, x_t, t)?;
    let c = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mean = x_t.zip_map(&eps, |x, e| (x - c * e) * inv)?;
    if t == 1 {
        return Ok(mean);
    }
    let sigma = (beta * (1.0 - sched.alpha_bar(t - 1)?) / (1.0 - ab)).sqrt();
    let (h, w, ch) = x_t.shape();
    let z = Field::gaussian(rng, h, w, ch)?;
    mean.zip_map(&z, |m, z| m + sigma * z)
}

/// Generalised DDIM step `t -> t-s`. `z` is drawn only when `sigma > 0`, so
/// `eta = 0` consumes no randomness.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    sched: &NoiseSchedule,
    model: &dyn Denoiser,
    x_t: &Field,
    t: usize,
    s: usize,
    eta: f64,
    rng: &mut Rng,
) -> Result<Field> {
    if t == 0 || s == 0 || s > t {
        return Err(Error::TimestepOutOfRange {
            t: t.wrapping_sub(s),
            max: sched.steps(),
        });
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta {eta} outside [0, 1]")));
    }
    let ab = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t - s)?;
    let eps = predict(model, x_t, t)?;
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let c_x0 = ab_prev.sqrt();
    let c_eps = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let out = x_t.zip_map(&eps, |x, e| {
        let x0 = (x - sb * e) / sa;
        c_x0 * x0 + c_eps * e
    })?;
    if sigma > 0.0 {
        let (h, w, ch) = x_t.shape();
        let z = Field::gaussian(rng, h, w, ch)?;
        return out.zip_map(&z, |o, z| o + sigma * z);
    }
    Ok(out)
}

fn renoise(
    sched: &NoiseSchedule,
    x_t: &Field,
    t: usize,
    target: usize,
    mode: RenoiseMode,
    rng: &mut Rng,
) -> Result<Field> {
    let ab_target = sched.alpha_bar(target)?;
    let ratio = match mode {
        RenoiseMode::Jump => ab_target / sched.alpha_bar(t)?,
        RenoiseMode::PaperLiteral => ab_target,
    };
    let (a, b) = (ratio.sqrt(), (1.0 - ratio).max(0.0).sqrt());
    let (h, w, c) = x_t.shape();
    let z = Field::gaussian(rng, h, w, c)?;
    x_t.zip_map(&z, |x, z| a * x + b * z)
}

/// One stage's fixed context: model, conditioning and step policy.
struct Stage<'a> {
    sched: &'a NoiseSchedule,
    model: &'a dyn Denoiser,
    known: &'a Field,
    mask: &'a MaskField,
    eta: f64,
    mode: RenoiseMode,
}

impl<'a> Stage<'a> {
    fn new(
        sched: &'a NoiseSchedule,
        model: &'a dyn Denoiser,
        known: &'a Field,
        mask: &'a MaskField,
        eta: f64,
        mode: RenoiseMode,
    ) -> Result<Self> {
        mask.matches(known)?;
        let (h, w, c) = known.shape();
        if !model.supports(h, w, c) {
            return Err(Error::UnsupportedShape { h, w, c });
        }
        Ok(Self {
            sched,
            model,
            known,
            mask,
            eta,
            mode,
        })
    }

    fn cdm(&self, x: &Field, t: usize, s: usize, rng: &mut Rng, trace: &mut StepTrace) -> Result<Field> {
        x.same_shape(self.known)?;
        let unknown = ddim_step(self.sched, self.model, x, t, s, self.eta, rng)?;
        let known_t = if t - s > 0 {
            let (h, w, c) = x.shape();
            let eps = Field::gaussian(rng, h, w, c)?;
            forward_diffuse(self.sched, self.known, t - s, &eps)?
        } else {
            self.known.clone()
        };
        trace.push(OpKind::Cdm, t, t - s, x.height());
        composite(&known_t, &unknown, self.mask)
    }

    #[allow(clippy::too_many_arguments)]
    fn crm(
        &self,
        x: &Field,
        t: usize,
        k: usize,
        s: usize,
        rng: &mut Rng,
        trace: &mut StepTrace,
    ) -> Result<Field> {
        if k == 0 {
            return Ok(x.clone());
        }
        let top = t + k * s;
        if top > self.sched.steps() {
            return Err(Error::TimestepOutOfRange {
                t: top,
                max: self.sched.steps(),
            });
        }
        let mut x = renoise(self.sched, x, t, top, self.mode, rng)?;
        trace.push(OpKind::Renoise, t, top, x.height());
        let mut level = top;
        while level > t {
            x = self.cdm(&x, level, s, rng, trace)?;
            level -= s;
        }
        Ok(x)
    }

    /// `m` CDMs (the last clamped at level 0) then `n` CRMs.
    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        x: &Field,
        t: usize,
        m: usize,
        n: usize,
        k: usize,
        s: usize,
        rng: &mut Rng,
        trace: &mut StepTrace,
    ) -> Result<(Field, usize)> {
        let mut x = x.clone();
        let mut t = t;
        for _ in 0..m {
            if t == 0 {
                break;
            }
            let step = s.min(t);
            x = self.cdm(&x, t, step, rng, trace)?;
            t -= step;
        }
        for _ in 0..n {
            x = self.crm(&x, t, k, s, rng, trace)?;
        }
        Ok((x, t))
    }

    fn run(
        &self,
        x: Field,
        p: &StageParams,
        name: &str,
        rng: &mut Rng,
        trace: &mut StepTrace,
    ) -> Result<Field> {
        p.validate(self.sched)?;
        let start = Instant::now();
        let before = trace.total_evals();
        let mut x = x;
        let mut t = p.steps;
        while t > 0 {
            (x, t) = self.block(&x, t, p.m, p.n, p.k, p.s, rng, trace)?;
        }
        let out = composite(self.known, &x, self.mask)?;
        trace.stages.push(StageSummary {
            name: name.into(),
            resolution: x.height(),
            t_start: p.steps,
            evals: trace.total_evals() - before,
            wall_clock_s: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

/// Conditioned denoising module: a DDIM step on the whole state, then the
/// known region is replaced by the known image diffused to `t - s`.
#[allow(clippy::too_many_arguments)]
pub fn cdm(
    sched: &NoiseSchedule,
    model: &dyn Denoiser,
    x_t: &Field,
    t: usize,
    s: usize,
    eta: f64,
    known: &Field,
    mask: &MaskField,
    rng: &mut Rng,
) -> Result<Field> {
    let stage = Stage::new(sched, model, known, mask, eta, RenoiseMode::Jump)?;
    stage.cdm(x_t, t, s, rng, &mut StepTrace::default())
}

/// Conditioned resampling module: renoise `x_t` to `t + k*s`, then `k` CDMs
/// of stride `s` back to `t`.
#[allow(clippy::too_many_arguments)]
pub fn crm(
    sched: &NoiseSchedule,
    model: &dyn Denoiser,
    x_t: &Field,
    t: usize,
    k: usize,
    s: usize,
    eta: f64,
    mode: RenoiseMode,
    known: &Field,
    mask: &MaskField,
    rng: &mut Rng,
    trace: &mut StepTrace,
) -> Result<Field> {
    let stage = Stage::new(sched, model, known, mask, eta, mode)?;
    stage.crm(x_t, t, k, s, rng, trace)
}

/// `m` CDMs followed by `n` CRMs. Returns the state and its level.
#[allow(clippy::too_many_arguments)]
pub fn denoise_block(
    sched: &NoiseSchedule,
    model: &dyn Denoiser,
    x_t: &Field,
    t: usize,
    p: &StageParams,
    known: &Field,
    mask: &MaskField,
    rng: &mut Rng,
    trace: &mut StepTrace,
) -> Result<(Field, usize)> {
    if p.m * p.s > t {
        return Err(Error::TimestepOutOfRange {
            t: 0,
            max: sched.steps(),
        });
    }
    let stage = Stage::new(sched, model, known, mask, p.eta, p.renoise_mode)?;
    stage.block(x_t, t, p.m, p.n, p.k, p.s, rng, trace)
}

/// Inpaints from pure noise at level `p.steps` in one stage at the
/// resolution of `known`.
pub fn single_stage_inpaint(
    sched: &NoiseSchedule,
    model: &dyn Denoiser,
    known: &Field,
    mask: &MaskField,
    p: &StageParams,
    rng: &mut Rng,
) -> Result<(Field, StepTrace)> {
    let stage = Stage::new(sched, model, known, mask, p.eta, p.renoise_mode)?;
    let (h, w, c) = known.shape();
    let x = Field::gaussian(rng, h, w, c)?;
    let mut trace = StepTrace::default();
    let out = stage.run(x, p, "single", rng, &mut trace)?;
    Ok((out, trace))
}

/// Coarse-to-fine inpainting: a coarse stage on the downsampled problem,
/// bilinear upsampling, diffusion to `Tf`, and a refinement stage at full
/// resolution.
pub fn cfs_inpaint(
    sched: &NoiseSchedule,
    coarse_model: &dyn Denoiser,
    fine_model: &dyn Denoiser,
    known: &Field,
    mask: &MaskField,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<(Field, StepTrace)> {
    cfg.validate(sched)?;
    let (h, w, c) = known.shape();
    if h != cfg.fine_res || w != cfg.fine_res {
        return Err(Error::Dimension(format!(
            "image is {h}x{w}, config expects {0}x{0}",
            cfg.fine_res
        )));
    }
    mask.matches(known)?;
    if !cfg.cfs {
        return single_stage_inpaint(sched, fine_model, known, mask, &cfg.coarse_stage(), rng);
    }
    let cr = cfg.coarse_res;
    let coarse_known = bilinear_resize(known, cr, cr)?;
    let coarse_mask = mask.downsample(cfg.fine_res / cr)?;
    let coarse = Stage::new(sched, coarse_model, &coarse_known, &coarse_mask, cfg.eta, cfg.renoise_mode)?;
    let fine = Stage::new(sched, fine_model, known, mask, cfg.eta, cfg.renoise_mode)?;

    let mut trace = StepTrace::default();
    let x = Field::gaussian(rng, cr, cr, c)?;
    let x0_coarse = coarse.run(x, &cfg.coarse_stage(), "coarse", rng, &mut trace)?;

    let up = bilinear_resize(&x0_coarse, h, w)?;
    let eps = Field::gaussian(rng, h, w, c)?;
    let x = forward_diffuse(sched, &up, cfg.t_f, &eps)?;
    trace.push(OpKind::Diffuse, 0, cfg.t_f, h);

    let out = fine.run(x, &cfg.fine_stage(), "fine", rng, &mut trace)?;
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::AnalyticGaussianDenoiser;

    fn four() -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3, 0.4]).unwrap()
    }

    struct Zero;
    impl Denoiser for Zero {
        fn predict(&self, x: &Field, _t: usize) -> Result<Field> {
            Ok(x.map(|_| 0.0))
        }
        fn supports(&self, _h: usize, _w: usize, _c: usize) -> bool {
            true
        }
    }

    /// Returns a fixed noise field regardless of input.
    struct Fixed(Field);
    impl Denoiser for Fixed {
        fn predict(&self, _x: &Field, _t: usize) -> Result<Field> {
            Ok(self.0.clone())
        }
        fn supports(&self, h: usize, w: usize, c: usize) -> bool {
            self.0.shape() == (h, w, c)
        }
    }

    fn random(seed: u64, h: usize, w: usize) -> Field {
        Field::gaussian(&mut Rng::new(seed), h, w, 1).unwrap()
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = four();
        let x0 = random(1, 4, 4);
        let eps = random(2, 4, 4);
        assert_eq!(forward_diffuse(&s, &x0, 0, &eps).unwrap(), x0);
        let ones = Field::filled(2, 2, 1, 1.0).unwrap();
        let zeros = Field::zeros(2, 2, 1).unwrap();
        let y = forward_diffuse(&s, &ones, 2, &zeros).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.72f64.sqrt()).abs() < 1e-15));
        assert!((y.get(0, 0, 0) - 0.8485).abs() < 1e-4);
        assert!(forward_diffuse(&s, &ones, 5, &zeros).is_err());
        assert!(forward_diffuse(&s, &ones, 1, &x0).is_err());
    }

    #[test]
    fn forward_diffuse_variance_at_t_max() {
        let s = four();
        let x0 = Field::zeros(128, 128, 1).unwrap();
        let eps = random(3, 128, 128);
        let y = forward_diffuse(&s, &x0, 4, &eps).unwrap();
        let want = 1.0 - 0.3024;
        assert!((y.variance() - want).abs() < 0.03 * want, "{}", y.variance());
    }

    #[test]
    fn ddpm_with_zero_model() {
        let s = four();
        let x = random(4, 4, 4);
        let out = ddpm_step(&s, &Zero, &x, 1, &mut Rng::new(0)).unwrap();
        let want = x.map(|v| v / 0.9f64.sqrt());
        assert!(out.zip_map(&want, |a, b| (a - b).abs()).unwrap().max() < 1e-14);
        assert!(ddpm_step(&s, &Zero, &x, 0, &mut Rng::new(0)).is_err());
        assert!(ddpm_step(&s, &Zero, &x, 5, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn ddim_examples() {
        let s = four();
        let ones = Field::filled(3, 3, 1, 1.0).unwrap();
        let eps = Field::filled(3, 3, 1, 0.5).unwrap();
        let model = Fixed(eps.clone());
        let x3 = forward_diffuse(&s, &ones, 3, &eps).unwrap();
        let out = ddim_step(&s, &model, &x3, 3, 2, 0.0, &mut Rng::new(0)).unwrap();
        let want = 0.9f64.sqrt() + 0.1f64.sqrt() * 0.5;
        assert!(out.data().iter().all(|v| (v - want).abs() < 1e-12));
        assert!((want - 1.1068).abs() < 1e-4);

        // t - s = 0 returns the clean estimate exactly
        let x = random(5, 3, 3);
        let out = ddim_step(&s, &model, &x, 2, 2, 0.0, &mut Rng::new(0)).unwrap();
        let ab = s.alpha_bar(2).unwrap();
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x0 = x.zip_map(&eps, |x, e| (x - b * e) / a).unwrap();
        assert_eq!(out, x0);

        let again = ddim_step(&s, &model, &x, 2, 2, 0.0, &mut Rng::new(9)).unwrap();
        assert_eq!(out, again);
        assert!(ddim_step(&s, &model, &x, 2, 3, 0.0, &mut Rng::new(0)).is_err());
        assert!(ddim_step(&s, &model, &x, 2, 1, 1.5, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn ddim_matches_ddpm() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let model = AnalyticGaussianDenoiser::uniform(0.3, 0.05, s.clone(), 16, 16, 1).unwrap();
        for t in 1..=100 {
            let x = random(t as u64, 16, 16);
            let a = ddpm_step(&s, &model, &x, t, &mut Rng::new(t as u64)).unwrap();
            let b = ddim_step(&s, &model, &x, t, 1, 1.0, &mut Rng::new(t as u64)).unwrap();
            let diff = a.zip_map(&b, |p, q| (p - q).abs()).unwrap().max();
            assert!(diff <= 1e-10, "t={t} diff={diff}");
        }
    }

    fn half_mask(h: usize, w: usize) -> MaskField {
        MaskField::from_fn(h, w, |_, x| x < w / 2).unwrap()
    }

    #[test]
    fn cdm_final_step_and_empty_mask() {
        let s = four();
        let known = random(6, 4, 4);
        let x = random(7, 4, 4);
        let m = half_mask(4, 4);
        let out = cdm(&s, &Zero, &x, 2, 2, 0.0, &known, &m, &mut Rng::new(0)).unwrap();
        for y in 0..4 {
            for xx in 0..2 {
                assert_eq!(out.get(y, xx, 0), known.get(y, xx, 0));
            }
        }
        let none = MaskField::filled(4, 4, false).unwrap();
        let a = cdm(&s, &Zero, &x, 3, 1, 0.0, &known, &none, &mut Rng::new(1)).unwrap();
        let b = ddim_step(&s, &Zero, &x, 3, 1, 0.0, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        let wrong = random(8, 4, 6);
        assert!(cdm(&s, &Zero, &wrong, 3, 1, 0.0, &known, &m, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn crm_zero_k_and_bookkeeping() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let known = random(9, 4, 4);
        let m = half_mask(4, 4);
        let x = random(10, 4, 4);
        let mut trace = StepTrace::default();
        let same = crm(&s, &Zero, &x, 10, 0, 3, 0.0, RenoiseMode::Jump, &known, &m, &mut Rng::new(0), &mut trace)
            .unwrap();
        assert_eq!(same, x);
        assert!(trace.ops.is_empty());
        crm(&s, &Zero, &x, 10, 4, 3, 0.0, RenoiseMode::Jump, &known, &m, &mut Rng::new(0), &mut trace).unwrap();
        assert_eq!(trace.ops[0].kind, OpKind::Renoise);
        assert_eq!((trace.ops[0].t_before, trace.ops[0].t_after), (10, 22));
        assert_eq!(trace.ops.last().unwrap().t_after, 10);
        assert_eq!(trace.total_evals(), 4);
        let err = crm(&s, &Zero, &x, 45, 2, 3, 0.0, RenoiseMode::Jump, &known, &m, &mut Rng::new(0), &mut trace);
        assert!(err.is_err());
    }

    #[test]
    fn block_composition() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let known = random(11, 4, 4);
        let m = half_mask(4, 4);
        let x = random(12, 4, 4);
        let p = StageParams {
            steps: 50,
            m: 1,
            n: 0,
            k: 2,
            s: 3,
            eta: 0.5,
            renoise_mode: RenoiseMode::Jump,
        };
        let mut trace = StepTrace::default();
        let (a, t) = denoise_block(&s, &Zero, &x, 20, &p, &known, &m, &mut Rng::new(3), &mut trace).unwrap();
        let b = cdm(&s, &Zero, &x, 20, 3, 0.5, &known, &m, &mut Rng::new(3)).unwrap();
        assert_eq!((a, t), (b, 17));

        let p = StageParams { m: 3, n: 8, k: 2, ..p };
        let mut trace = StepTrace::default();
        denoise_block(&s, &Zero, &x, 20, &p, &known, &m, &mut Rng::new(3), &mut trace).unwrap();
        assert_eq!(trace.total_evals(), 19);
        assert!(denoise_block(&s, &Zero, &x, 5, &p, &known, &m, &mut Rng::new(3), &mut trace).is_err());
    }

    #[test]
    fn default_config_counts() {
        let cfg = SamplerConfig::default();
        let cost = count_evals(&cfg);
        assert_eq!(cost.stage("coarse"), Some(322));
        assert_eq!(cost.stage("fine"), Some(175));
        assert!((cost.weighted - (322.0 / 16.0 + 175.0)).abs() < 1e-12);
        let base = SamplerConfig {
            t_c: 250,
            s: 1,
            mc: 1,
            nc: 1,
            k: 1,
            cfs: false,
            ..cfg
        };
        assert_eq!(count_evals(&base).total(), 500);
        assert_eq!(count_evals(&base).weighted, 500.0);
    }

    #[test]
    fn config_validation() {
        let sched = NoiseSchedule::linear(250, 1e-4, 0.02).unwrap();
        assert!(SamplerConfig::default().validate(&sched).is_ok());
        let bad = [
            SamplerConfig { t_f: 300, ..Default::default() },
            SamplerConfig { t_c: 300, ..Default::default() },
            SamplerConfig { s: 0, ..Default::default() },
            SamplerConfig { mc: 0, ..Default::default() },
            SamplerConfig { k: 0, ..Default::default() },
            SamplerConfig { eta: 1.5, ..Default::default() },
            SamplerConfig { coarse_res: 48, ..Default::default() },
            SamplerConfig { coarse_res: 512, ..Default::default() },
            SamplerConfig { t_c: 250, mc: 1, k: 5, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate(&sched).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn config_json_keys() {
        let json = serde_json::to_value(SamplerConfig::default()).unwrap();
        for key in ["Tc", "Tf", "mc", "mf", "nc", "nf", "s", "k", "coarse_res", "fine_res", "eta"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(json["renoise_mode"], "jump");
        let partial: SamplerConfig = serde_json::from_str(r#"{"Tc": 100, "renoise_mode": "paper_literal"}"#).unwrap();
        assert_eq!(partial.t_c, 100);
        assert_eq!(partial.renoise_mode, RenoiseMode::PaperLiteral);
        assert_eq!(partial.mf, 2);
    }

    #[test]
    fn all_known_mask_returns_known() {
        let sched = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let known = random(13, 16, 16).map(|v| 0.5 + 0.1 * v);
        let model = AnalyticGaussianDenoiser::uniform(0.5, 0.01, sched.clone(), 16, 16, 1).unwrap();
        let coarse = AnalyticGaussianDenoiser::uniform(0.5, 0.01, sched.clone(), 8, 8, 1).unwrap();
        let m = MaskField::filled(16, 16, true).unwrap();
        let cfg = SamplerConfig {
            t_c: 20,
            t_f: 10,
            coarse_res: 8,
            fine_res: 16,
            ..Default::default()
        };
        let (out, _) = cfs_inpaint(&sched, &coarse, &model, &known, &m, &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(out, known);
        let (out, _) =
            single_stage_inpaint(&sched, &model, &known, &m, &cfg.coarse_stage(), &mut Rng::new(0)).unwrap();
        assert_eq!(out, known);
    }

    #[test]
    fn trace_accounting_and_determinism() {
        let sched = NoiseSchedule::linear(60, 1e-3, 0.05).unwrap();
        let known = random(14, 16, 16).map(|v| 0.5 + 0.1 * v);
        let model = AnalyticGaussianDenoiser::uniform(0.5, 0.01, sched.clone(), 16, 16, 1).unwrap();
        let coarse = AnalyticGaussianDenoiser::uniform(0.5, 0.01, sched.clone(), 8, 8, 1).unwrap();
        let m = half_mask(16, 16);
        let cfg = SamplerConfig {
            t_c: 47,
            t_f: 13,
            mc: 3,
            mf: 2,
            nc: 2,
            nf: 1,
            s: 4,
            k: 2,
            coarse_res: 8,
            fine_res: 16,
            eta: 0.3,
            ..Default::default()
        };
        let (a, trace) = cfs_inpaint(&sched, &coarse, &model, &known, &m, &cfg, &mut Rng::new(5)).unwrap();
        let (b, trace2) = cfs_inpaint(&sched, &coarse, &model, &known, &m, &cfg, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(trace.ops, trace2.ops);
        let cost = count_evals(&cfg);
        assert_eq!(trace.stage_evals("coarse"), cost.stage("coarse"));
        assert_eq!(trace.stage_evals("fine"), cost.stage("fine"));
        assert!((trace.weighted_evals(16) - cost.weighted).abs() < 1e-12);
        for w in trace.ops.windows(2) {
            assert_eq!(w[0].t_after, w[1].t_before);
        }
        for op in &trace.ops {
            match op.kind {
                OpKind::Cdm => assert!(op.t_before - op.t_after == 4 || op.t_after == 0),
                OpKind::Renoise => assert_eq!(op.t_after - op.t_before, 8),
                OpKind::Diffuse => assert_eq!((op.t_before, op.t_after), (0, 13)),
            }
        }
        assert_eq!(trace.ops.last().unwrap().t_after, 0);
    }

    #[test]
    fn single_stage_toggle_uses_coarse_params() {
        let sched = NoiseSchedule::linear(60, 1e-3, 0.05).unwrap();
        let known = random(15, 16, 16);
        let model = AnalyticGaussianDenoiser::uniform(0.0, 1.0, sched.clone(), 16, 16, 1).unwrap();
        let m = half_mask(16, 16);
        let cfg = SamplerConfig {
            t_c: 30,
            mc: 2,
            nc: 1,
            s: 3,
            k: 2,
            fine_res: 16,
            coarse_res: 8,
            cfs: false,
            ..Default::default()
        };
        let (_, trace) = cfs_inpaint(&sched, &model, &model, &known, &m, &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(trace.total_evals(), count_evals(&cfg).total());
        assert_eq!(trace.stages.len(), 1);
        assert_eq!(trace.stages[0].name, "single");
    }
}
