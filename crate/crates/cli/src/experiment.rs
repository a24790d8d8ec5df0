//! The degrade / sample / diagnose pipeline behind the CLI verbs.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use snips_core::diagnostics::{faithfulness_of_residual, write_reports_csv};
use snips_core::sampler::{aggregate, chain_rng};
use snips_core::{
    make_block_average, make_geometric_schedule, make_inpainting_mask, make_random_projection, make_uniform_blur,
    psnr, sample_vs_mean_gap, snips_sample_chain, svd_decompose, validate_crossing, Boundary, DegradationSVD,
    FaithfulnessReport, LinearOperator, SamplerConfig,
};

use crate::config::{ExperimentConfig, OperatorParams, Task};
use crate::imageio::{read_png, write_png, Image};
use crate::prior::PriorSource;
use crate::vecfile;

/// Measurement noise streams live in the upper half of the stream space so
/// they never collide with chain streams.
const NOISE_STREAM: u64 = 1 << 63;
/// Pixel std maps are scaled by this factor before writing.
pub const STD_IMAGE_SCALE: f64 = 4.0;
pub const MEASUREMENT_FILE: &str = "y.snvc";

/// Image shape plus the degradation operator for one experiment.
pub struct Setup {
    pub cfg: ExperimentConfig,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// The input image, when there is one.
    pub input: Option<Image>,
    /// `None` for synthesis.
    pub op: Option<LinearOperator>,
    pub svd: DegradationSVD,
}

impl Setup {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let input = cfg.input.as_deref().map(read_png).transpose()?;
        let (width, height, channels) = match (&input, &cfg.shape) {
            (Some(img), _) => (img.width, img.height, img.channels.len()),
            (None, Some(s)) => (s.width, s.height, s.channels),
            (None, None) => bail!("no input image or shape to size the signal"),
        };
        ensure!(width > 0 && height > 0, "image must have at least one pixel");
        ensure!(channels == 1 || channels == 3, "images have 1 or 3 channels, got {channels}");
        let op = build_operator(cfg.task, &cfg.operator, cfg.operator_seed(), width, height)?;
        let svd = match &op {
            Some(op) => svd_decompose(op)?,
            None => null_svd(width * height)?,
        };
        Ok(Self {
            cfg,
            width,
            height,
            channels,
            input,
            op,
            svd,
        })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn output_dir(&self) -> Result<PathBuf> {
        let dir = self.cfg.resolved_output_dir();
        std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(dir)
    }

    fn image(&self, channels: Vec<DVector<f64>>) -> Result<Image> {
        Image::new(self.width, self.height, channels)
    }
}

/// A `1 x n` zero operator with `V = I`: every coordinate is unobserved.
fn null_svd(n: usize) -> Result<DegradationSVD> {
    Ok(DegradationSVD::from_parts(
        DMatrix::identity(1, 1),
        DVector::zeros(1),
        DMatrix::identity(n, n),
    )?)
}

/// The operator for `task` on a `width x height` channel; `None` for synthesis.
pub fn build_operator(
    task: Task,
    params: &OperatorParams,
    seed: u64,
    width: usize,
    height: usize,
) -> Result<Option<LinearOperator>> {
    let n = width * height;
    let square = || -> Result<usize> {
        ensure!(width == height, "task {} needs a square image, got {width}x{height}", task.name());
        Ok(width)
    };
    let op = match task {
        Task::Synthesize => return Ok(None),
        Task::Denoise => LinearOperator::identity(n)?,
        Task::Deblur => make_uniform_blur(square()?, params.kernel, Boundary::Circular)?,
        Task::Sr => make_block_average(square()?, params.block)?,
        Task::Cs => make_random_projection(n, params.fraction, seed)?,
        Task::Inpaint => {
            let kept = match &params.mask {
                Some(path) => {
                    let mask = read_png(path)?;
                    ensure!(
                        mask.width == width && mask.height == height,
                        "mask is {}x{}, image is {width}x{height}",
                        mask.width,
                        mask.height
                    );
                    (0..n).filter(|&i| mask.channels[0][i] > 0.5).collect()
                }
                None => random_mask(n, params.keep, seed)?,
            };
            make_inpainting_mask(n, &kept)?
        }
    };
    Ok(Some(op))
}

fn random_mask(n: usize, keep: f64, seed: u64) -> Result<Vec<usize>> {
    ensure!(keep > 0.0 && keep <= 1.0, "inpainting keep fraction must lie in (0, 1], got {keep}");
    let m = ((keep * n as f64).round() as usize).max(1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut chain_rng(seed, 0));
    idx.truncate(m);
    idx.sort_unstable();
    Ok(idx)
}

/// `y = H x + σ0 n` per channel; channel `c` draws its noise from its own stream.
pub fn measure(op: &LinearOperator, x: &[DVector<f64>], sigma0: f64, seed: u64) -> Result<Vec<DVector<f64>>> {
    x.iter()
        .enumerate()
        .map(|(c, xc)| {
            let mut rng = chain_rng(seed, NOISE_STREAM | c as u64);
            let clean = op.apply(xc)?;
            Ok(clean.map(|v| v + sigma0 * rng.sample::<f64, _>(StandardNormal)))
        })
        .collect()
}

/// Degrades the input image and writes `y.snvc` plus a viewable `y.png` where
/// the measurement has an image shape.
pub fn degrade(setup: &Setup) -> Result<Vec<DVector<f64>>> {
    let op = setup
        .op
        .as_ref()
        .ok_or_else(|| anyhow!("synthesis has no measurement to degrade"))?;
    let input = setup
        .input
        .as_ref()
        .ok_or_else(|| anyhow!("degrading needs an input image"))?;
    let y = measure(op, &input.channels, setup.cfg.sigma0(), setup.cfg.seed)?;
    let dir = setup.output_dir()?;
    vecfile::write(&dir.join(MEASUREMENT_FILE), &y)?;
    let view = match setup.cfg.task {
        Task::Denoise | Task::Deblur => Some(Image::new(setup.width, setup.height, y.clone())?),
        Task::Sr => {
            let side = setup.width / setup.cfg.operator.block;
            Some(Image::new(side, side, y.clone())?)
        }
        Task::Inpaint => {
            let back = y.iter().map(|c| op.apply_transpose(c)).collect::<snips_core::Result<_>>()?;
            Some(setup.image(back)?)
        }
        Task::Cs | Task::Synthesize => None,
    };
    if let Some(img) = view {
        write_png(&img, &dir.join("y.png"))?;
    }
    Ok(y)
}

#[derive(Debug, Serialize)]
struct MetricsRow {
    image: String,
    status: String,
    psnr: Option<f64>,
    residual_std: Option<f64>,
    dagostino_pvalue: Option<f64>,
    neighbor_rho: Option<f64>,
    pass_std: Option<bool>,
    pass_normality: Option<bool>,
    pass_rho: Option<bool>,
}

impl MetricsRow {
    fn new(image: String, status: String, psnr: Option<f64>, f: Option<&FaithfulnessReport>) -> Self {
        Self {
            image,
            status,
            psnr,
            residual_std: f.map(|f| f.residual_std),
            dagostino_pvalue: f.and_then(|f| f.dagostino_pvalue),
            neighbor_rho: f.and_then(|f| f.neighbor_rho),
            pass_std: f.map(|f| f.pass_std),
            pass_normality: f.map(|f| f.pass_normality),
            pass_rho: f.map(|f| f.pass_rho),
        }
    }
}

#[derive(Debug, Serialize)]
struct ChainRecord {
    index: usize,
    /// ChaCha stream of channel 0; channel `c` uses `stream + (c << 32)`.
    stream: u64,
    status: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    versions: serde_json::Value,
    seeds: serde_json::Value,
    command: Vec<String>,
    invalid_crossings: Vec<usize>,
    chains: Vec<ChainRecord>,
    gap_db: Option<f64>,
}

/// Outcome of [`sample`], mostly for tests.
#[derive(Debug)]
pub struct SampleSummary {
    pub succeeded: usize,
    pub failed: usize,
    pub output_dir: PathBuf,
}

fn flatten(channels: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        channels.iter().map(|c| c.len()).sum(),
        channels.iter().flat_map(|c| c.iter().copied()),
    )
}

fn residual(op: &LinearOperator, y: &[DVector<f64>], x: &[DVector<f64>]) -> Result<Vec<f64>> {
    let mut r = Vec::new();
    for (yc, xc) in y.iter().zip(x) {
        r.extend((yc - op.apply(xc)?).iter().copied());
    }
    Ok(r)
}

/// Draws `cfg.chains` posterior samples and writes images, `metrics.csv` and
/// `manifest.json`. Fails only when every chain fails.
pub fn sample(setup: &Setup, y: Option<&[DVector<f64>]>) -> Result<SampleSummary> {
    let cfg = &setup.cfg;
    let sigma0 = cfg.sigma0();
    let measurement: Vec<DVector<f64>> = match (cfg.task.has_measurement(), y) {
        (false, _) => vec![DVector::zeros(1); setup.channels],
        (true, Some(y)) => y.to_vec(),
        (true, None) => bail!("task {} needs a measurement", cfg.task.name()),
    };
    ensure!(
        measurement.len() == setup.channels,
        "measurement has {} channels, image has {}",
        measurement.len(),
        setup.channels
    );
    for yc in &measurement {
        ensure!(
            yc.len() == setup.svd.rows(),
            "measurement has {} values per channel, operator expects {}",
            yc.len(),
            setup.svd.rows()
        );
    }

    let s = &cfg.schedule;
    let schedule = make_geometric_schedule(s.sigma_first, s.sigma_last, s.levels, sigma0, s.c, s.tau)?;
    let crossing = validate_crossing(&schedule, &setup.svd);
    let invalid_crossings = crossing.invalid_indices();
    if !invalid_crossings.is_empty() {
        eprintln!(
            "warning: {} singular value(s) never cross from above to below sigma0 in the schedule; \
             raise --sigma-first or lower --sigma-last",
            invalid_crossings.len()
        );
    }
    let sampler = SamplerConfig::new(schedule, cfg.seed);
    let source = PriorSource::load(&cfg.prior, setup.width, setup.height)?;

    let run_one = |k: usize| -> Result<Vec<DVector<f64>>> {
        let prior = source.instance()?;
        measurement
            .iter()
            .enumerate()
            .map(|(c, yc)| {
                let stream = ((c as u64) << 32) | k as u64;
                Ok(snips_sample_chain(&setup.svd, yc, prior.as_ref(), &sampler, stream)?.sample)
            })
            .collect()
    };
    let results: Vec<Result<Vec<DVector<f64>>>> = match cfg.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()?
            .install(|| (0..cfg.chains).into_par_iter().map(run_one).collect()),
        None => (0..cfg.chains).into_par_iter().map(run_one).collect(),
    };

    let dir = setup.output_dir()?;
    let reference = match (&setup.input, cfg.task.has_measurement()) {
        (Some(img), true) => Some(flatten(&img.channels)),
        _ => None,
    };
    let diagnose = |x: &[DVector<f64>]| -> Result<Option<FaithfulnessReport>> {
        match &setup.op {
            Some(op) => Ok(Some(faithfulness_of_residual(&residual(op, &measurement, x)?, sigma0)?)),
            None => Ok(None),
        }
    };

    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut good: Vec<&Vec<DVector<f64>>> = Vec::new();
    for (k, r) in results.iter().enumerate() {
        let name = format!("sample_{k}");
        let status = match r {
            Ok(x) => {
                write_png(&setup.image(x.clone())?, &dir.join(format!("{name}.png")))?;
                let p = reference.as_ref().map(|rf| psnr(&flatten(x), rf)).transpose()?;
                rows.push(MetricsRow::new(name, "ok".into(), p, diagnose(x)?.as_ref()));
                good.push(x);
                "ok".to_string()
            }
            Err(e) => {
                let msg = format!("failed: {e:#}");
                rows.push(MetricsRow::new(name, msg.clone(), None, None));
                msg
            }
        };
        records.push(ChainRecord {
            index: k,
            stream: k as u64,
            status,
        });
    }
    if good.is_empty() {
        write_manifest(&dir, setup, invalid_crossings, records, None)?;
        bail!("all {} chains failed; see {}", cfg.chains, dir.join("manifest.json").display());
    }

    let mut mean = Vec::with_capacity(setup.channels);
    let mut std = Vec::with_capacity(setup.channels);
    for c in 0..setup.channels {
        let (m, s) = aggregate(good.iter().map(|x| &x[c]));
        mean.push(m.expect("at least one sample"));
        std.push(s.expect("at least one sample") * STD_IMAGE_SCALE);
    }
    write_png(&setup.image(mean.clone())?, &dir.join("mean.png"))?;
    write_png(&setup.image(std)?, &dir.join("std.png"))?;
    let p = reference.as_ref().map(|rf| psnr(&flatten(&mean), rf)).transpose()?;
    rows.push(MetricsRow::new("mean".into(), "ok".into(), p, diagnose(&mean)?.as_ref()));

    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;

    let gap_db = match &reference {
        Some(rf) if good.len() >= 2 => {
            let flat: Vec<DVector<f64>> = good.iter().map(|x| flatten(x)).collect();
            Some(sample_vs_mean_gap(&flat, rf)?.gap_db)
        }
        _ => None,
    };
    write_manifest(&dir, setup, invalid_crossings, records, gap_db)?;
    Ok(SampleSummary {
        succeeded: good.len(),
        failed: cfg.chains - good.len(),
        output_dir: dir,
    })
}

fn write_manifest(
    dir: &Path,
    setup: &Setup,
    invalid_crossings: Vec<usize>,
    chains: Vec<ChainRecord>,
    gap_db: Option<f64>,
) -> Result<()> {
    let manifest = Manifest {
        config: &setup.cfg,
        versions: serde_json::json!({ "snips": env!("CARGO_PKG_VERSION"), "manifest": 1 }),
        seeds: serde_json::json!({
            "seed": setup.cfg.seed,
            "operator_seed": setup.cfg.operator_seed(),
            "noise_stream": NOISE_STREAM,
        }),
        command: std::env::args().collect(),
        invalid_crossings,
        chains,
        gap_db,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
}

/// Loads a measurement file and checks it against the setup.
pub fn load_measurement(setup: &Setup, path: &Path) -> Result<Vec<DVector<f64>>> {
    let y = vecfile::read(path)?;
    ensure!(
        y.len() == setup.channels,
        "{} holds {} channel(s), image has {}",
        path.display(),
        y.len(),
        setup.channels
    );
    Ok(y)
}

/// Degrades, then samples.
pub fn run(setup: &Setup) -> Result<SampleSummary> {
    let y = if setup.cfg.task.has_measurement() {
        Some(degrade(setup)?)
    } else {
        None
    };
    sample(setup, y.as_deref())
}

/// Operator and noise settings for `diagnose`.
#[derive(Debug, Clone, clap::Args)]
pub struct DiagnoseArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Measurement file written by `degrade`
    #[arg(long)]
    pub measurement: PathBuf,
    /// Reconstruction to check
    #[arg(long)]
    pub estimate: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub sigma0: f64,
    #[arg(long, default_value_t = OperatorParams::default().kernel)]
    pub kernel: usize,
    #[arg(long, default_value_t = OperatorParams::default().block)]
    pub block: usize,
    #[arg(long, default_value_t = OperatorParams::default().fraction)]
    pub fraction: f64,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = OperatorParams::default().keep)]
    pub keep: f64,
    /// Seed the operator was built with (the run seed unless overridden)
    #[arg(long, default_value_t = 0)]
    pub operator_seed: u64,
    /// Also write the report as CSV
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Faithfulness of an estimate to a measurement, over all channels at once.
pub fn diagnose(args: &DiagnoseArgs) -> Result<FaithfulnessReport> {
    let estimate = read_png(&args.estimate)?;
    let params = OperatorParams {
        kernel: args.kernel,
        block: args.block,
        fraction: args.fraction,
        mask: args.mask.clone(),
        keep: args.keep,
        operator_seed: Some(args.operator_seed),
    };
    let op = build_operator(args.task, &params, args.operator_seed, estimate.width, estimate.height)?
        .ok_or_else(|| anyhow!("synthesis has no measurement to diagnose against"))?;
    let y = vecfile::read(&args.measurement)?;
    ensure!(
        y.len() == estimate.channels.len(),
        "measurement has {} channel(s), estimate has {}",
        y.len(),
        estimate.channels.len()
    );
    ensure!(
        y.iter().all(|c| c.len() == op.rows()),
        "measurement length does not match the {} operator",
        args.task.name()
    );
    let report = faithfulness_of_residual(&residual(&op, &y, &estimate.channels)?, args.sigma0)?;
    if let Some(path) = &args.csv {
        let f = std::fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
        write_reports_csv(std::slice::from_ref(&report), f)?;
    }
    Ok(report)
}
