//! Score models `s(x̃, σ) = (D(x̃, σ) - x̃) / σ²`.
//!
//! The analytic priors have closed-form MMSE denoisers and serve as exact
//! ground truth. [`ExternalDenoiser`] talks to a separate process that returns
//! denoised images over a small binary protocol.

mod external;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{argument, check_dim, Result, SnipsError};

pub use external::{
    decode_request, decode_response, encode_request, encode_response, serve_denoiser,
    DenoiserRequest, ExternalDenoiser, PROTOCOL_VERSION, REQUEST_MAGIC, RESPONSE_MAGIC,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Anything that can evaluate the score of the `σ`-smoothed prior.
pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    fn score(&self, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>>;
}

/// `N(mean, covariance)` stored through the eigendecomposition of the covariance.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(argument("prior dimension must be positive"));
        }
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(SnipsError::Dimension {
                expected: n,
                actual: covariance.nrows().max(covariance.ncols()),
                context: "prior covariance",
            });
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(argument("prior mean and covariance must be finite"));
        }
        let scale = covariance.amax().max(1.0);
        let asym = (&covariance - covariance.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(argument(format!(
                "prior covariance is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let eig = SymmetricEigen::new(covariance.clone());
        let min = eig.eigenvalues.min();
        if min <= 0.0 {
            return Err(argument(format!(
                "prior covariance must be positive definite (min eigenvalue {min:e})"
            )));
        }
        Ok(Self {
            mean,
            covariance,
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        })
    }

    /// `N(0, variance I)`.
    pub fn isotropic(n: usize, mean: f64, variance: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(n, mean),
            DMatrix::from_diagonal_element(n, n, variance),
        )
    }

    /// Stationary prior over a `side x side` raster with a squared-exponential
    /// covariance `variance * exp(-d² / (2 length_scale²))` plus a small nugget.
    pub fn stationary(side: usize, mean: f64, variance: f64, length_scale: f64) -> Result<Self> {
        if !(variance > 0.0 && length_scale > 0.0) {
            return Err(argument("stationary prior needs positive variance and length scale"));
        }
        let n = side * side;
        let cov = DMatrix::from_fn(n, n, |a, b| {
            let (ra, ca) = ((a / side) as f64, (a % side) as f64);
            let (rb, cb) = ((b / side) as f64, (b % side) as f64);
            let d2 = (ra - rb).powi(2) + (ca - cb).powi(2);
            let k = variance * (-d2 / (2.0 * length_scale * length_scale)).exp();
            if a == b {
                k + 1e-4 * variance
            } else {
                k
            }
        });
        Self::new(DVector::from_element(n, mean), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// `-(C + σ² I)^{-1} (x - μ)`; `σ = 0` gives the clean-prior score.
    pub fn score(&self, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len(), "prior score input")?;
        check_sigma(sigma, true)?;
        let var = sigma * sigma;
        let mut coeffs = self.eigenvectors.tr_mul(&(x - &self.mean));
        for (c, lambda) in coeffs.iter_mut().zip(self.eigenvalues.iter()) {
            let denom = lambda + var;
            if denom <= 0.0 {
                return Err(SnipsError::Numeric("singular smoothed covariance".into()));
            }
            *c /= -denom;
        }
        Ok(&self.eigenvectors * coeffs)
    }

    /// `E[x | x̃]` for `x̃ = x + σ n`.
    pub fn denoise(&self, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
        let s = self.score(x, sigma)?;
        Ok(x + s * (sigma * sigma))
    }

    /// `log N(x; μ, C + σ² I)`.
    pub fn log_density(&self, x: &DVector<f64>, sigma: f64) -> Result<f64> {
        check_dim(self.dim(), x.len(), "prior density input")?;
        check_sigma(sigma, true)?;
        let var = sigma * sigma;
        let coeffs = self.eigenvectors.tr_mul(&(x - &self.mean));
        let mut quad = 0.0;
        let mut logdet = 0.0;
        for (c, lambda) in coeffs.iter().zip(self.eigenvalues.iter()) {
            quad += c * c / (lambda + var);
            logdet += (lambda + var).ln();
        }
        Ok(-0.5 * (quad + logdet + self.dim() as f64 * LN_2PI))
    }
}

impl ScoreModel for GaussianPrior {
    fn dim(&self) -> usize {
        GaussianPrior::dim(self)
    }

    fn score(&self, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
        GaussianPrior::score(self, x, sigma)
    }
}

pub fn gaussian_score(prior: &GaussianPrior, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
    prior.score(x, sigma)
}

/// Finite mixture of Gaussians with a shared dimension.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    weights: Vec<f64>,
    components: Vec<GaussianPrior>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianPrior>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(argument(format!(
                "need one weight per component, got {} weights and {} components",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(argument("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(argument(format!("mixture weights sum to {total}, not 1")));
        }
        let n = components[0].dim();
        for c in &components {
            check_dim(n, c.dim(), "mixture component")?;
        }
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianPrior] {
        &self.components
    }

    /// Posterior component probabilities given `x̃` at noise `σ`.
    pub fn responsibilities(&self, x: &DVector<f64>, sigma: f64) -> Result<Vec<f64>> {
        let logs = self.log_joint(x, sigma)?;
        let lse = log_sum_exp(&logs);
        Ok(logs.iter().map(|l| (l - lse).exp()).collect())
    }

    fn log_joint(&self, x: &DVector<f64>, sigma: f64) -> Result<Vec<f64>> {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| Ok(w.ln() + c.log_density(x, sigma)?))
            .collect()
    }

    /// `log p_σ(x̃)` of the smoothed mixture.
    pub fn log_density(&self, x: &DVector<f64>, sigma: f64) -> Result<f64> {
        Ok(log_sum_exp(&self.log_joint(x, sigma)?))
    }

    /// `E[x | x̃] = Σ_k w̃_k m_k(x̃)`.
    pub fn denoise(&self, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
        check_sigma(sigma, false)?;
        let resp = self.responsibilities(x, sigma)?;
        let mut out = DVector::zeros(self.dim());
        for (r, c) in resp.iter().zip(&self.components) {
            if *r > 0.0 {
                out.axpy(*r, &c.denoise(x, sigma)?, 1.0);
            }
        }
        Ok(out)
    }

    pub fn score(&self, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
        let d = self.denoise(x, sigma)?;
        Ok((d - x) / (sigma * sigma))
    }
}

impl ScoreModel for GmmPrior {
    fn dim(&self) -> usize {
        GmmPrior::dim(self)
    }

    fn score(&self, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
        GmmPrior::score(self, x, sigma)
    }
}

pub fn gmm_denoise(prior: &GmmPrior, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
    prior.denoise(x, sigma)
}

pub fn gmm_score(prior: &GmmPrior, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
    prior.score(x, sigma)
}

fn check_sigma(sigma: f64, allow_zero: bool) -> Result<()> {
    let ok = sigma.is_finite() && (sigma > 0.0 || (allow_zero && sigma == 0.0));
    if !ok {
        return Err(argument(format!("invalid noise level {sigma}")));
    }
    Ok(())
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
