use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cfs_core::io::{read_image, read_mask, write_image};
use cfs_core::{Field, MaskField, MetricReport, Rng, SamplerConfig, ScheduleSpec, StepTrace};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::pipeline::Pipeline;
use crate::REPORT_VERSION;

/// An image and its mask, paired by file stem.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub name: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub name: String,
    pub image: Field,
    pub mask: MaskField,
}

impl CorpusEntry {
    pub fn load(&self) -> Result<CorpusItem> {
        let image = read_image(&self.image).with_context(|| format!("reading {}", self.image.display()))?;
        let mask = read_mask(&self.mask).with_context(|| format!("reading {}", self.mask.display()))?;
        mask.matches(&image)?;
        Ok(CorpusItem {
            name: self.name.clone(),
            image,
            mask,
        })
    }
}

fn stem(p: &Path) -> Option<String> {
    p.file_stem()?.to_str().map(str::to_owned)
}

fn list(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "pgm" || x == "ppm") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Pairs `images/<stem>.p?m` with `masks/<stem>.pgm`. Images without a
/// mask are an error for the whole corpus.
pub fn discover(images: &Path, masks: &Path) -> Result<Vec<CorpusEntry>> {
    let mask_files = list(masks)?;
    let mut entries = Vec::new();
    for image in list(images)? {
        let name = stem(&image).context("non-UTF-8 file name")?;
        let Some(mask) = mask_files.iter().find(|m| stem(m).as_deref() == Some(&name)) else {
            bail!("no mask for image {}", image.display());
        };
        entries.push(CorpusEntry {
            name,
            image,
            mask: mask.clone(),
        });
    }
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemReport {
    pub name: String,
    pub output: Option<String>,
    pub metrics: Option<MetricReport>,
    pub evals: Option<usize>,
    pub weighted_evals: Option<f64>,
    pub wall_clock_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub version: u32,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub schedule: ScheduleSpec,
    pub param_count: usize,
    pub items: Vec<ItemReport>,
    /// Mean over successful items, in item order.
    pub mean: Option<MetricReport>,
    pub failures: usize,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub version: u32,
    pub name: String,
    pub total_evals: usize,
    pub weighted_evals: f64,
    pub trace: StepTrace,
}

impl TraceFile {
    pub fn new(name: &str, trace: StepTrace, fine_res: usize) -> Self {
        Self {
            version: REPORT_VERSION,
            name: name.into(),
            total_evals: trace.total_evals(),
            weighted_evals: trace.weighted_evals(fine_res),
            trace,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run_item(
    pipeline: &Pipeline,
    entry: &CorpusEntry,
    rng: &mut Rng,
    out_dir: Option<&Path>,
) -> Result<ItemReport> {
    let item = entry.load()?;
    let result = pipeline.inpaint(&item.image, &item.mask, rng)?;
    let metrics = MetricReport::compute(&result.image, &item.image).ok();
    let ext = if item.image.channels() == 1 { "pgm" } else { "ppm" };
    let output = format!("{}.{ext}", item.name);
    if let Some(dir) = out_dir {
        write_image(dir.join(&output), &result.image)?;
        let trace = TraceFile::new(&item.name, result.trace.clone(), pipeline.sampler.fine_res);
        write_json(&dir.join(format!("{}.trace.json", item.name)), &trace)?;
    }
    let report = ItemReport {
        name: item.name,
        output: Some(output),
        metrics,
        evals: Some(result.trace.total_evals()),
        weighted_evals: Some(result.trace.weighted_evals(pipeline.sampler.fine_res)),
        wall_clock_s: result.wall_clock_s,
        error: None,
    };
    Ok(report)
}

/// Inpaints every entry. Item `i` uses the substream `(seed, i)`, so the
/// outcome does not depend on thread count or scheduling. Failures are
/// recorded per item and do not stop the run.
pub fn run_entries(
    cfg: &RunConfig,
    pipeline: &Pipeline,
    entries: &[CorpusEntry],
    out_dir: Option<&Path>,
) -> Result<CorpusReport> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    if entries.is_empty() {
        log::warn!("empty corpus");
    }
    let start = std::time::Instant::now();
    let items: Vec<ItemReport> = entries
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let mut rng = Rng::derive(cfg.seed, i as u64);
            match run_item(pipeline, entry, &mut rng, out_dir) {
                Ok(report) => report,
                Err(e) => {
                    log::error!("{}: {e:#}", entry.name);
                    ItemReport {
                        name: entry.name.clone(),
                        output: None,
                        metrics: None,
                        evals: None,
                        weighted_evals: None,
                        wall_clock_s: 0.0,
                        error: Some(format!("{e:#}")),
                    }
                }
            }
        })
        .collect();
    let metrics: Vec<MetricReport> = items.iter().filter_map(|i| i.metrics).collect();
    let report = CorpusReport {
        version: REPORT_VERSION,
        seed: cfg.seed,
        sampler: cfg.sampler,
        schedule: cfg.schedule,
        param_count: pipeline.param_count(),
        failures: items.iter().filter(|i| i.error.is_some()).count(),
        mean: MetricReport::mean(&metrics),
        items,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok(report)
}

/// Runs the corpus named by `cfg.images`/`cfg.masks` into `cfg.out_dir`.
pub fn run_corpus(cfg: &RunConfig, pipeline: &Pipeline) -> Result<CorpusReport> {
    let (Some(images), Some(masks)) = (&cfg.images, &cfg.masks) else {
        bail!("corpus runs need both image and mask directories");
    };
    let entries = discover(images, masks)?;
    run_entries(cfg, pipeline, &entries, cfg.out_dir.as_deref())
}
