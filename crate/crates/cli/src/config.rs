//! Experiment configuration: a JSON document with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

/// Environment variable consulted when neither the flags nor the file name an
/// output directory.
pub const OUTPUT_DIR_ENV: &str = "SNIPS_OUTPUT_DIR";
const FALLBACK_OUTPUT_DIR: &str = "snips-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Deblur,
    Sr,
    Cs,
    Inpaint,
    Denoise,
    Synthesize,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Deblur => "deblur",
            Task::Sr => "sr",
            Task::Cs => "cs",
            Task::Inpaint => "inpaint",
            Task::Denoise => "denoise",
            Task::Synthesize => "synthesize",
        }
    }

    pub fn has_measurement(self) -> bool {
        self != Task::Synthesize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorParams {
    /// Odd blur kernel width.
    pub kernel: usize,
    /// Super-resolution block width.
    pub block: usize,
    /// Kept fraction of the signal length for compressive sensing.
    pub fraction: f64,
    /// Inpainting mask image; pixels above one half are observed.
    pub mask: Option<PathBuf>,
    /// Kept fraction for a random inpainting mask when no mask file is given.
    pub keep: f64,
    /// Seed for random projections and random masks; the run seed when absent.
    pub operator_seed: Option<u64>,
}

impl Default for OperatorParams {
    fn default() -> Self {
        Self {
            kernel: 5,
            block: 2,
            fraction: 0.25,
            mask: None,
            keep: 0.5,
            operator_seed: None,
        }
    }
}

/// Geometric annealing schedule from `sigma_first` down to `sigma_last`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub sigma_first: f64,
    pub sigma_last: f64,
    pub levels: usize,
    pub c: f64,
    pub tau: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            sigma_first: 90.0,
            sigma_last: 0.01,
            levels: 500,
            c: 3.3e-2,
            tau: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    /// JSON file with `mean` and `covariance`.
    Gaussian { path: PathBuf },
    /// JSON file with `weights` and `components`.
    Gmm { path: PathBuf },
    /// Squared-exponential Gaussian prior over a square image.
    Stationary {
        mean: f64,
        variance: f64,
        length_scale: f64,
    },
    /// Child process speaking the denoiser wire protocol.
    External {
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
}

fn default_timeout() -> f64 {
    30.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shape {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default)]
    pub operator: OperatorParams,
    /// Measurement noise; `0.1` for measured tasks and `0` for synthesis when absent.
    #[serde(default)]
    pub sigma0: Option<f64>,
    #[serde(default)]
    pub schedule: ScheduleParams,
    pub prior: PriorSpec,
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Signal shape for synthesis without an input image.
    #[serde(default)]
    pub shape: Option<Shape>,
    /// Parallel chain workers; all cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_chains() -> usize {
    8
}

/// Field overrides collected from the command line. `None` leaves the file value.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Experiment JSON (a run manifest is accepted too)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    /// Blur kernel width
    #[arg(long)]
    pub kernel: Option<usize>,
    /// Super-resolution block width
    #[arg(long)]
    pub block: Option<usize>,
    /// Compressive-sensing kept fraction
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Inpainting mask image
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Kept fraction of a random inpainting mask
    #[arg(long)]
    pub keep: Option<f64>,
    #[arg(long)]
    pub operator_seed: Option<u64>,
    #[arg(long)]
    pub sigma0: Option<f64>,
    #[arg(long)]
    pub sigma_first: Option<f64>,
    #[arg(long)]
    pub sigma_last: Option<f64>,
    /// Number of noise levels
    #[arg(long)]
    pub levels: Option<usize>,
    /// Step-size scale
    #[arg(long)]
    pub c: Option<f64>,
    /// Langevin steps per level
    #[arg(long)]
    pub tau: Option<usize>,
    /// Gaussian prior JSON file
    #[arg(long, group = "prior_flag")]
    pub prior_gaussian: Option<PathBuf>,
    /// Mixture prior JSON file
    #[arg(long, group = "prior_flag")]
    pub prior_gmm: Option<PathBuf>,
    /// Stationary prior as MEAN,VARIANCE,LENGTH_SCALE
    #[arg(long, group = "prior_flag")]
    pub prior_stationary: Option<String>,
    /// External denoiser command line, split with shell quoting rules
    #[arg(long, group = "prior_flag")]
    pub prior_external: Option<String>,
    /// Seconds to wait for each external denoiser reply
    #[arg(long)]
    pub prior_timeout: Option<f64>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Input PNG image
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output directory [default: $SNIPS_OUTPUT_DIR, then ./snips-out]
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Synthesis shape as WIDTHxHEIGHTxCHANNELS
    #[arg(long)]
    pub shape: Option<String>,
    /// Parallel chain workers
    #[arg(long)]
    pub workers: Option<usize>,
}

impl Overrides {
    /// Builds the configuration from `--config` (if any) and the flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => {
                let task = self
                    .task
                    .ok_or_else(|| anyhow!("--task is required when no --config is given"))?;
                let prior = self
                    .prior_from_flags()?
                    .ok_or_else(|| anyhow!("a prior flag is required when no --config is given"))?;
                ExperimentConfig::new(task, prior)
            }
        };
        self.apply(&mut cfg)?;
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn prior_from_flags(&self) -> Result<Option<PriorSpec>> {
        let timeout_secs = self.prior_timeout.unwrap_or_else(default_timeout);
        Ok(if let Some(p) = &self.prior_gaussian {
            Some(PriorSpec::Gaussian { path: absolute(p)? })
        } else if let Some(p) = &self.prior_gmm {
            Some(PriorSpec::Gmm { path: absolute(p)? })
        } else if let Some(s) = &self.prior_stationary {
            let parts: Vec<f64> = s
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("--prior-stationary expects MEAN,VARIANCE,LENGTH_SCALE, got {s:?}"))?;
            let [mean, variance, length_scale] = parts[..] else {
                bail!("--prior-stationary expects three comma-separated numbers, got {s:?}");
            };
            Some(PriorSpec::Stationary {
                mean,
                variance,
                length_scale,
            })
        } else if let Some(cmd) = &self.prior_external {
            let command =
                shlex::split(cmd).ok_or_else(|| anyhow!("cannot split external command {cmd:?}"))?;
            Some(PriorSpec::External { command, timeout_secs })
        } else {
            None
        })
    }

    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(t) = self.task {
            cfg.task = t;
        }
        let op = &mut cfg.operator;
        set(&mut op.kernel, self.kernel);
        set(&mut op.block, self.block);
        set(&mut op.fraction, self.fraction);
        set(&mut op.keep, self.keep);
        if let Some(m) = &self.mask {
            op.mask = Some(absolute(m)?);
        }
        if self.operator_seed.is_some() {
            op.operator_seed = self.operator_seed;
        }
        if self.sigma0.is_some() {
            cfg.sigma0 = self.sigma0;
        }
        let s = &mut cfg.schedule;
        set(&mut s.sigma_first, self.sigma_first);
        set(&mut s.sigma_last, self.sigma_last);
        set(&mut s.levels, self.levels);
        set(&mut s.c, self.c);
        set(&mut s.tau, self.tau);
        if let Some(p) = self.prior_from_flags()? {
            cfg.prior = p;
        } else if let (Some(t), PriorSpec::External { timeout_secs, .. }) = (self.prior_timeout, &mut cfg.prior) {
            *timeout_secs = t;
        }
        set(&mut cfg.chains, self.chains);
        set(&mut cfg.seed, self.seed);
        if let Some(i) = &self.input {
            cfg.input = Some(absolute(i)?);
        }
        if let Some(o) = &self.output_dir {
            cfg.output_dir = Some(o.clone());
        }
        if let Some(s) = &self.shape {
            cfg.shape = Some(parse_shape(s)?);
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        Ok(())
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("cannot resolve path {}", p.display()))
}

pub fn parse_shape(s: &str) -> Result<Shape> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|v| v.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("shape must look like 16x16x1, got {s:?}"))?;
    match parts[..] {
        [width, height, channels] => Ok(Shape {
            width,
            height,
            channels,
        }),
        [width, height] => Ok(Shape {
            width,
            height,
            channels: 1,
        }),
        _ => bail!("shape must look like 16x16x1, got {s:?}"),
    }
}

impl ExperimentConfig {
    pub fn new(task: Task, prior: PriorSpec) -> Self {
        Self {
            task,
            operator: OperatorParams::default(),
            sigma0: None,
            schedule: ScheduleParams::default(),
            prior,
            chains: default_chains(),
            seed: 0,
            input: None,
            output_dir: None,
            shape: None,
            workers: None,
        }
    }

    /// Reads a config file or the `config` member of a run manifest. Relative
    /// paths inside the file are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))?;
        let body = match value.get("config") {
            Some(inner) if value.get("versions").is_some() => inner.clone(),
            _ => value,
        };
        let mut cfg: ExperimentConfig =
            serde_json::from_value(body).with_context(|| format!("invalid experiment config in {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.rebase(&base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.input.as_mut() {
            fix(p);
        }
        if let Some(p) = self.operator.mask.as_mut() {
            fix(p);
        }
        match &mut self.prior {
            PriorSpec::Gaussian { path } | PriorSpec::Gmm { path } => fix(path),
            _ => {}
        }
    }

    /// Fills task defaults and checks everything that can be checked before
    /// touching images.
    fn finish(&mut self) -> Result<()> {
        let sigma0 = match (self.task, self.sigma0) {
            (Task::Synthesize, Some(s)) if s != 0.0 => bail!("synthesis has no measurement; sigma0 must be 0, got {s}"),
            (Task::Synthesize, _) => 0.0,
            (_, Some(s)) => s,
            (_, None) => 0.1,
        };
        if !(sigma0 >= 0.0 && sigma0.is_finite()) {
            bail!("sigma0 must be a finite non-negative number, got {sigma0}");
        }
        self.sigma0 = Some(sigma0);
        if self.chains == 0 {
            bail!("chains must be at least 1");
        }
        if self.workers == Some(0) {
            bail!("workers must be at least 1");
        }
        match self.task {
            Task::Synthesize => {
                if self.input.is_none() && self.shape.is_none() {
                    bail!("synthesis needs --shape or an --input image to take the shape from");
                }
            }
            _ => {
                if self.input.is_none() {
                    bail!("task {} needs an --input image", self.task.name());
                }
            }
        }
        if let Some(p) = &self.input {
            if !p.is_file() {
                bail!("input image {} does not exist", p.display());
            }
        }
        if self.task == Task::Inpaint {
            if let Some(m) = &self.operator.mask {
                if !m.is_file() {
                    bail!("mask image {} does not exist", m.display());
                }
            }
        }
        match &self.prior {
            PriorSpec::Gaussian { path } | PriorSpec::Gmm { path } if !path.is_file() => {
                bail!("prior file {} does not exist", path.display())
            }
            PriorSpec::External { command, timeout_secs } => {
                if command.is_empty() {
                    bail!("external prior command is empty");
                }
                if !(*timeout_secs > 0.0) {
                    bail!("external prior timeout must be positive");
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0.unwrap_or(0.0)
    }

    pub fn operator_seed(&self) -> u64 {
        self.operator.operator_seed.unwrap_or(self.seed)
    }

    /// Flag, then file, then `$SNIPS_OUTPUT_DIR`, then `./snips-out`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(FALLBACK_OUTPUT_DIR))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_defaults_and_task_sigma() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"task": "synthesize", "prior": {"kind": "stationary", "mean": 0.5, "variance": 0.04, "length_scale": 2.0},
                "shape": {"width": 4, "height": 4, "channels": 1}}"#,
        )
        .unwrap();
        assert_eq!(cfg.chains, 8);
        assert_eq!(cfg.schedule, ScheduleParams::default());
        let mut cfg = cfg;
        cfg.finish().unwrap();
        assert_eq!(cfg.sigma0(), 0.0);

        let mut bad = cfg.clone();
        bad.sigma0 = Some(0.1);
        assert!(bad.finish().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(
            r#"{"task": "denoise", "prior": {"kind": "gaussian", "path": "p.json"}, "sigma": 0.1}"#,
        );
        assert!(err.is_err());
    }

    #[test]
    fn flags_override_and_parse() {
        let o = Overrides {
            task: Some(Task::Synthesize),
            prior_stationary: Some("0.5, 0.04, 2".into()),
            shape: Some("8x6".into()),
            levels: Some(10),
            ..Default::default()
        };
        let cfg = o.resolve().unwrap();
        assert_eq!(cfg.schedule.levels, 10);
        assert_eq!(cfg.shape, Some(Shape { width: 8, height: 6, channels: 1 }));
        assert!(matches!(cfg.prior, PriorSpec::Stationary { length_scale, .. } if length_scale == 2.0));

        let o = Overrides {
            task: Some(Task::Synthesize),
            prior_external: Some("den --scale '1 2'".into()),
            shape: Some("4x4x3".into()),
            ..Default::default()
        };
        match o.resolve().unwrap().prior {
            PriorSpec::External { command, timeout_secs } => {
                assert_eq!(command, vec!["den", "--scale", "1 2"]);
                assert_eq!(timeout_secs, 30.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_pieces_are_reported() {
        let o = Overrides {
            task: Some(Task::Denoise),
            prior_stationary: Some("0.5,0.04,2".into()),
            ..Default::default()
        };
        let msg = o.resolve().unwrap_err().to_string();
        assert!(msg.contains("--input"), "{msg}");
        assert!(parse_shape("4x").is_err());
        let o = Overrides {
            task: Some(Task::Denoise),
            ..Default::default()
        };
        assert!(o.resolve().is_err());
    }
}
