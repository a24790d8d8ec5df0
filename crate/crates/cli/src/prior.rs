//! Prior construction from the configured [`PriorSpec`].

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use snips_core::{ExternalDenoiser, GaussianPrior, GmmPrior, ScoreModel};

use crate::config::PriorSpec;

/// On-disk Gaussian: `{"mean": [...], "covariance": [[...], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianFile {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

/// On-disk mixture: `{"weights": [...], "components": [GaussianFile, ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmFile {
    pub weights: Vec<f64>,
    pub components: Vec<GaussianFile>,
}

impl GaussianFile {
    pub fn from_prior(p: &GaussianPrior) -> Self {
        let c = p.covariance();
        Self {
            mean: p.mean().iter().copied().collect(),
            covariance: (0..c.nrows()).map(|r| c.row(r).iter().copied().collect()).collect(),
        }
    }

    fn build(&self) -> Result<GaussianPrior> {
        let n = self.mean.len();
        if self.covariance.len() != n || self.covariance.iter().any(|r| r.len() != n) {
            bail!("covariance must be {n}x{n} to match the mean");
        }
        let cov = DMatrix::from_fn(n, n, |r, c| self.covariance[r][c]);
        Ok(GaussianPrior::new(DVector::from_vec(self.mean.clone()), cov)?)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read prior {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid prior file {}", path.display()))
}

pub fn load_gaussian(path: &Path) -> Result<GaussianPrior> {
    read_json::<GaussianFile>(path)?
        .build()
        .with_context(|| format!("invalid Gaussian prior {}", path.display()))
}

pub fn load_gmm(path: &Path) -> Result<GmmPrior> {
    let file: GmmFile = read_json(path)?;
    let comps = file
        .components
        .iter()
        .map(GaussianFile::build)
        .collect::<Result<Vec<_>>>()
        .with_context(|| format!("invalid mixture component in {}", path.display()))?;
    Ok(GmmPrior::new(file.weights, comps)?)
}

/// Where each chain gets its prior from. In-process priors are shared; an
/// external denoiser is spawned once per chain so chains never share a session.
pub enum PriorSource {
    Shared(Arc<dyn ScoreModel>),
    External {
        command: Vec<String>,
        dim: usize,
        timeout: Duration,
    },
}

impl PriorSource {
    /// `width x height` is the per-channel image shape.
    pub fn load(spec: &PriorSpec, width: usize, height: usize) -> Result<Self> {
        let dim = width * height;
        let shared: Arc<dyn ScoreModel> = match spec {
            PriorSpec::Gaussian { path } => Arc::new(load_gaussian(path)?),
            PriorSpec::Gmm { path } => Arc::new(load_gmm(path)?),
            PriorSpec::Stationary {
                mean,
                variance,
                length_scale,
            } => {
                if width != height {
                    bail!("the stationary prior needs a square image, got {width}x{height}");
                }
                Arc::new(GaussianPrior::stationary(width, *mean, *variance, *length_scale)?)
            }
            PriorSpec::External { command, timeout_secs } => {
                return Ok(PriorSource::External {
                    command: command.clone(),
                    dim,
                    timeout: Duration::from_secs_f64(*timeout_secs),
                })
            }
        };
        if shared.dim() != dim {
            bail!(
                "prior has dimension {}, but each image channel has {dim} pixels",
                shared.dim()
            );
        }
        Ok(PriorSource::Shared(shared))
    }

    pub fn instance(&self) -> Result<Arc<dyn ScoreModel>> {
        match self {
            PriorSource::Shared(p) => Ok(Arc::clone(p)),
            PriorSource::External { command, dim, timeout } => Ok(Arc::new(
                ExternalDenoiser::spawn(command, *dim, *timeout)
                    .with_context(|| format!("cannot start external denoiser {command:?}"))?,
            )),
        }
    }
}

/// MMSE denoiser for `serve-prior`. The stationary prior is built on first
/// use from the request length, which must be a square.
pub enum ServedPrior {
    Gaussian(GaussianPrior),
    Gmm(GmmPrior),
    Stationary {
        mean: f64,
        variance: f64,
        length_scale: f64,
        built: Option<GaussianPrior>,
    },
}

impl ServedPrior {
    pub fn from_spec(spec: &PriorSpec) -> Result<Self> {
        Ok(match spec {
            PriorSpec::Gaussian { path } => ServedPrior::Gaussian(load_gaussian(path)?),
            PriorSpec::Gmm { path } => ServedPrior::Gmm(load_gmm(path)?),
            PriorSpec::Stationary {
                mean,
                variance,
                length_scale,
            } => ServedPrior::Stationary {
                mean: *mean,
                variance: *variance,
                length_scale: *length_scale,
                built: None,
            },
            PriorSpec::External { .. } => bail!("an external prior cannot be served"),
        })
    }

    pub fn denoise(&mut self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let x = DVector::from_row_slice(x);
        let d = match self {
            ServedPrior::Gaussian(p) => p.denoise(&x, sigma)?,
            ServedPrior::Gmm(p) => p.denoise(&x, sigma)?,
            ServedPrior::Stationary {
                mean,
                variance,
                length_scale,
                built,
            } => {
                let stale = built.as_ref().is_none_or(|p| p.dim() != x.len());
                if stale {
                    let side = (x.len() as f64).sqrt().round() as usize;
                    if side * side != x.len() {
                        bail!("stationary prior needs a square image, got {} values", x.len());
                    }
                    *built = Some(GaussianPrior::stationary(side, *mean, *variance, *length_scale)?);
                }
                built.as_ref().expect("built above").denoise(&x, sigma)?
            }
        };
        Ok(d.iter().copied().collect())
    }
}
