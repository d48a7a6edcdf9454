use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Result};
use cfs_core::sampler::count_evals;
use cfs_core::{MetricReport, Rng, SamplerConfig};
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusItem;
use crate::pipeline::Pipeline;
use crate::REPORT_VERSION;

/// Strategy switches layered on the single-stage, stride-1 baseline. The
/// light-weight model is not a switch: its size is recorded per row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Toggles {
    pub ddim: bool,
    pub cfs: bool,
}

impl Toggles {
    pub const BASELINE: Toggles = Toggles { ddim: false, cfs: false };
    pub const DDIM: Toggles = Toggles { ddim: true, cfs: false };
    pub const CFS: Toggles = Toggles { ddim: false, cfs: true };
    pub const FULL: Toggles = Toggles { ddim: true, cfs: true };

    /// Applies the switches to `base`: without DDIM the stride is 1,
    /// with it the stride of `base` is kept.
    pub fn apply(self, base: &SamplerConfig) -> SamplerConfig {
        SamplerConfig {
            s: if self.ddim { base.s } else { 1 },
            cfs: self.cfs,
            ..*base
        }
    }
}

impl fmt::Display for Toggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match (self.ddim, self.cfs) {
            (false, false) => "baseline",
            (true, false) => "ddim",
            (false, true) => "cfs",
            (true, true) => "ddim+cfs",
        })
    }
}

impl FromStr for Toggles {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => Toggles::BASELINE,
            "ddim" => Toggles::DDIM,
            "cfs" => Toggles::CFS,
            "ddim+cfs" | "full" => Toggles::FULL,
            _ => bail!("unknown strategy {s:?}"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub param_count: usize,
    pub ddim: bool,
    pub cfs: bool,
    pub s: usize,
    /// Summed over the corpus.
    pub evals: usize,
    pub weighted_evals: f64,
    pub predicted_weighted_evals: f64,
    pub wall_clock_s: f64,
    pub metrics: Option<MetricReport>,
    /// Baseline wall-clock over this row's.
    pub acceleration: f64,
    /// Baseline weighted evaluations over this row's, from `count_evals`.
    pub predicted_acceleration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub version: u32,
    pub seed: u64,
    pub repeats: usize,
    pub base: SamplerConfig,
    pub rows: Vec<BenchRow>,
}

/// Runs every strategy in `grid` over the corpus, one item at a time so
/// wall-clock spans do not overlap. Each row is timed `repeats` times and
/// the fastest pass is kept. Rows come back in grid order.
pub fn bench(
    corpus: &[CorpusItem],
    grid: &[Toggles],
    pipeline: &Pipeline,
    seed: u64,
    repeats: usize,
) -> Result<BenchReport> {
    if repeats == 0 {
        bail!("repeats must be at least 1");
    }
    if corpus.is_empty() {
        bail!("bench needs a nonempty corpus");
    }
    if !grid.contains(&Toggles::BASELINE) {
        bail!("bench grid must include the baseline");
    }
    let base = pipeline.sampler;
    // one untimed run so first-touch allocation does not land on a row
    let warm = Toggles::FULL.apply(&base);
    pipeline
        .with_sampler(warm)?
        .inpaint(&corpus[0].image, &corpus[0].mask, &mut Rng::new(seed))?;

    let mut rows = Vec::new();
    for &toggles in grid {
        let cfg = toggles.apply(&base);
        let run = pipeline.with_sampler(cfg)?;
        let predicted = count_evals(&cfg).weighted * corpus.len() as f64;
        let (mut evals, mut weighted, mut wall) = (0, 0.0, f64::INFINITY);
        let mut metrics = Vec::new();
        for pass in 0..repeats {
            let mut pass_wall = 0.0;
            for (i, item) in corpus.iter().enumerate() {
                let mut rng = Rng::derive(seed, i as u64);
                let out = run.inpaint(&item.image, &item.mask, &mut rng)?;
                pass_wall += out.wall_clock_s;
                if pass > 0 {
                    continue;
                }
                evals += out.trace.total_evals();
                weighted += out.trace.weighted_evals(cfg.fine_res);
                if let Ok(m) = MetricReport::compute(&out.image, &item.image) {
                    metrics.push(m);
                }
            }
            wall = wall.min(pass_wall);
        }
        log::info!("{toggles}: {evals} evals, {wall:.2}s");
        rows.push(BenchRow {
            name: toggles.to_string(),
            param_count: pipeline.param_count(),
            ddim: toggles.ddim,
            cfs: toggles.cfs,
            s: cfg.s,
            evals,
            weighted_evals: weighted,
            predicted_weighted_evals: predicted,
            wall_clock_s: wall,
            metrics: MetricReport::mean(&metrics),
            acceleration: 0.0,
            predicted_acceleration: 0.0,
        });
    }
    let baseline = rows
        .iter()
        .find(|r| !r.ddim && !r.cfs)
        .map(|r| (r.wall_clock_s, r.predicted_weighted_evals))
        .expect("baseline row present");
    for r in &mut rows {
        r.acceleration = baseline.0 / r.wall_clock_s;
        r.predicted_acceleration = baseline.1 / r.predicted_weighted_evals;
    }
    Ok(BenchReport {
        version: REPORT_VERSION,
        seed,
        repeats,
        base,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toggles_are_config_deltas() {
        let base = SamplerConfig::default();
        let b = Toggles::BASELINE.apply(&base);
        assert_eq!((b.s, b.cfs), (1, false));
        assert_eq!(Toggles::DDIM.apply(&base).s, 5);
        assert!(Toggles::FULL.apply(&base).cfs);
        for t in [Toggles::BASELINE, Toggles::DDIM, Toggles::CFS, Toggles::FULL] {
            assert_eq!(t.to_string().parse::<Toggles>().unwrap(), t);
        }
        assert!("turbo".parse::<Toggles>().is_err());
    }

    #[test]
    fn ddim_toggle_lowers_cost() {
        for cfs in [false, true] {
            let base = SamplerConfig { cfs, ..Default::default() };
            let without = count_evals(&Toggles { ddim: false, cfs }.apply(&base)).weighted;
            let with = count_evals(&Toggles { ddim: true, cfs }.apply(&base)).weighted;
            assert!(with < without);
        }
    }

    #[test]
    fn predicted_speedups_for_default_tuple() {
        let base = SamplerConfig::default();
        let cost = |t: Toggles| count_evals(&t.apply(&base)).weighted;
        // single stage with the coarse-stage tuple at stride 1
        assert_eq!(cost(Toggles::BASELINE), 1594.0);
        assert_eq!(cost(Toggles::DDIM), 322.0);
        assert!((cost(Toggles::FULL) - 195.125).abs() < 1e-12);
        // the 500-evaluation single-stage reference
        let plain = SamplerConfig { s: 1, mc: 1, nc: 1, k: 1, cfs: false, ..base };
        assert!((count_evals(&plain).weighted / cost(Toggles::FULL) - 2.5624).abs() < 1e-3);
    }
}
