use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cfs_cli::corpus::{discover, write_json, CorpusEntry};
use cfs_cli::{bench, run_corpus, train_toy, Models, RunConfig, Toggles, ToyTraining, TraceFile};
use cfs_core::denoiser::model_file;
use cfs_core::denoiser::toy::toy_image;
use cfs_core::io::{read_image, read_mask, write_image, write_mask};
use cfs_core::masks::generate_mask;
use cfs_core::{MaskKind, MetricReport, P2Params, Rng};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cfs", version, about = "Diffusion inpainting with coarse-to-fine sampling")]
struct Cli {
    /// Master seed; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for corpus runs and training (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run configuration JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a light-weight denoiser on the procedural toy set.
    Train(TrainArgs),
    /// Inpaint one image, or a directory of images.
    Inpaint(InpaintArgs),
    /// Generate evaluation masks.
    Maskgen(MaskgenArgs),
    /// Compare an output image with its reference.
    Metrics(MetricsArgs),
    /// Time the speed-up strategies against the baseline.
    Bench(BenchArgs),
    /// Write procedural toy images (and optionally masks).
    Toydata(ToydataArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    kshift: f64,
    #[arg(long, default_value_t = 512)]
    images: usize,
    #[arg(long, default_value_t = 32)]
    res: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 100)]
    checkpoint_every: usize,
    /// Where to write the loss curve JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InpaintArgs {
    #[arg(long, requires = "mask")]
    image: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    coarse_model: Option<PathBuf>,
    /// Output image (single-image mode).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trace JSON (single-image mode).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Image directory (corpus mode).
    #[arg(long, conflicts_with = "image")]
    images: Option<PathBuf>,
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct MaskgenArgs {
    #[arg(long)]
    kind: MaskKind,
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Output file, or a directory when `--count` is given.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    coarse_model: Option<PathBuf>,
    /// Comma-separated strategies: baseline, ddim, cfs, ddim+cfs.
    #[arg(long, default_value = "baseline,ddim,ddim+cfs", value_delimiter = ',')]
    grid: Vec<Toggles>,
    /// Timed passes per strategy; the fastest is reported.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ToydataArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    res: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// First item index; training uses indices below the training-set size.
    #[arg(long, default_value_t = 100_000)]
    start: u64,
    /// Also write one mask of this kind per image.
    #[arg(long, requires = "masks_dir")]
    mask_kind: Option<MaskKind>,
    #[arg(long)]
    masks_dir: Option<PathBuf>,
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = run_config(cli)?;
    let mut setup = ToyTraining {
        schedule: cfg.schedule,
        images: a.images,
        resolution: a.res,
        channels: a.channels,
        seed: cfg.seed,
        ..Default::default()
    };
    setup.train.steps = a.steps;
    setup.train.batch = a.batch;
    setup.train.lr = a.lr;
    setup.train.checkpoint_every = a.checkpoint_every;
    setup.train.p2 = P2Params::new(a.kshift, a.gamma)?;
    let (model, output) = train_toy(&setup)?;
    model_file::save(&model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{} parameters, loss {:.5} -> {:.5}",
        model.num_params(),
        output.report.initial_loss(),
        output.report.final_loss()
    );
    if let Some(p) = &a.report {
        write_json(p, &output)?;
    }
    Ok(())
}

fn inpaint(cli: &Cli, a: &InpaintArgs) -> Result<bool> {
    let mut cfg = run_config(cli)?;
    cfg.model = a.model.clone().or(cfg.model);
    cfg.coarse_model = a.coarse_model.clone().or(cfg.coarse_model);
    let models = Models::from_config(&cfg)?;
    let pipeline = models.pipeline(&cfg)?;

    if let Some(image) = &a.image {
        let mask_path = a.mask.as_ref().context("--mask is required with --image")?;
        let entry = CorpusEntry {
            name: image.file_stem().and_then(|s| s.to_str()).unwrap_or("image").into(),
            image: image.clone(),
            mask: mask_path.clone(),
        };
        let item = entry.load()?;
        let out = pipeline.inpaint(&item.image, &item.mask, &mut Rng::new(cfg.seed))?;
        let path = a.out.as_ref().context("--out is required with --image")?;
        write_image(path, &out.image)?;
        if let Some(t) = &a.trace {
            write_json(t, &TraceFile::new(&item.name, out.trace, cfg.sampler.fine_res))?;
        }
        return Ok(true);
    }

    cfg.images = a.images.clone().or(cfg.images);
    cfg.masks = a.masks.clone().or(cfg.masks);
    cfg.out_dir = a.out_dir.clone().or(cfg.out_dir);
    if cfg.out_dir.is_none() {
        bail!("corpus mode needs --out-dir");
    }
    let report = run_corpus(&cfg, &pipeline)?;
    if let Some(mean) = report.mean {
        println!(
            "{} items, {} failed; mean ssim {:.4}, rel_l1 {:.3}%, psnr {:.2} dB",
            report.items.len(),
            report.failures,
            mean.ssim,
            mean.rel_l1_pct,
            mean.psnr_db
        );
    }
    Ok(report.failures == 0)
}

fn maskgen(cli: &Cli, a: &MaskgenArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match a.count {
        None => write_mask(&a.out, &generate_mask(a.kind, a.size, a.size, &mut Rng::new(seed))?)?,
        Some(n) => {
            std::fs::create_dir_all(&a.out)?;
            for i in 0..n {
                let m = generate_mask(a.kind, a.size, a.size, &mut Rng::derive(seed, i as u64))?;
                write_mask(a.out.join(format!("{}_{i:04}.pgm", a.kind)), &m)?;
            }
        }
    }
    Ok(())
}

fn metrics(a: &MetricsArgs) -> Result<()> {
    let pred = read_image(&a.pred)?;
    let reference = read_image(&a.reference)?;
    let r = MetricReport::compute(&pred, &reference)?;
    if a.json {
        let value = serde_json::json!({ "version": cfs_cli::REPORT_VERSION, "metrics": r });
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        println!("ssim {:.6}\nrel_l1 {:.4}%\npsnr {:.3} dB", r.ssim, r.rel_l1_pct, r.psnr_db);
    }
    Ok(())
}

fn run_bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let mut cfg = run_config(cli)?;
    cfg.model = a.model.clone().or(cfg.model);
    cfg.coarse_model = a.coarse_model.clone().or(cfg.coarse_model);
    let images = a.images.clone().or(cfg.images.clone()).context("bench needs --images")?;
    let masks = a.masks.clone().or(cfg.masks.clone()).context("bench needs --masks")?;
    let corpus = discover(&images, &masks)?
        .iter()
        .map(CorpusEntry::load)
        .collect::<Result<Vec<_>>>()?;
    let models = Models::from_config(&cfg)?;
    let pipeline = models.pipeline(&cfg)?;
    let report = bench(&corpus, &a.grid, &pipeline, cfg.seed, a.repeats)?;
    for r in &report.rows {
        println!(
            "{:<10} evals {:>7} weighted {:>9.1} time {:>8.2}s  speedup {:>6.2}x (predicted {:>6.2}x)",
            r.name, r.evals, r.weighted_evals, r.wall_clock_s, r.acceleration, r.predicted_acceleration
        );
    }
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn toydata(cli: &Cli, a: &ToydataArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    std::fs::create_dir_all(&a.out_dir)?;
    if let Some(dir) = &a.masks_dir {
        std::fs::create_dir_all(dir)?;
    }
    let ext = if a.channels == 1 { "pgm" } else { "ppm" };
    for i in 0..a.count as u64 {
        let index = a.start + i;
        let name = format!("toy_{index:06}");
        write_image(a.out_dir.join(format!("{name}.{ext}")), &toy_image(seed, index, a.res, a.res, a.channels)?)?;
        if let (Some(kind), Some(dir)) = (a.mask_kind, &a.masks_dir) {
            let m = generate_mask(kind, a.res, a.res, &mut Rng::derive(seed ^ 0x6d61_736b, index))?;
            write_mask(dir.join(format!("{name}.pgm")), &m)?;
        }
    }
    Ok(())
}

fn check_mask_file(p: &Path) -> Result<()> {
    read_mask(p).map(|_| ()).with_context(|| format!("reading {}", p.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CFS_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match &cli.command {
        Command::Train(a) => train(&cli, a).map(|_| true),
        Command::Inpaint(a) => {
            if let Some(m) = &a.mask {
                if let Err(e) = check_mask_file(m) {
                    eprintln!("error: {e:#}");
                    return ExitCode::FAILURE;
                }
            }
            inpaint(&cli, a)
        }
        Command::Maskgen(a) => maskgen(&cli, a).map(|_| true),
        Command::Metrics(a) => metrics(a).map(|_| true),
        Command::Bench(a) => run_bench(&cli, a).map(|_| true),
        Command::Toydata(a) => toydata(&cli, a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
