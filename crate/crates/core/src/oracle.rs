//! Independent ground truth: exact Gaussian posteriors, the carved annealing
//! noise construction, and quadrature conditional scores in one or two
//! dimensions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{argument, check_dim, Result, SnipsError};
use crate::operators::{DegradationSVD, LinearOperator};
use crate::priors::{log_sum_exp, GaussianPrior, GmmPrior};
use crate::schedule::{validate_crossing, NoiseSchedule};

/// `N(mean, covariance)` with a cached symmetric square-root factor.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl GaussianPosterior {
    /// Symmetrises `covariance` and clips eigenvalues at zero; eigenvalues
    /// below `-1e-10` (relative to the largest) are rejected.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        check_dim(mean.len(), covariance.nrows(), "posterior covariance")?;
        check_dim(mean.len(), covariance.ncols(), "posterior covariance")?;
        let sym = (&covariance + covariance.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let scale = eig.eigenvalues.amax().max(1.0);
        if eig.eigenvalues.min() < -1e-10 * scale {
            return Err(SnipsError::Numeric(format!(
                "posterior covariance is indefinite (min eigenvalue {:e})",
                eig.eigenvalues.min()
            )));
        }
        let clipped = eig.eigenvalues.map(|l| l.max(0.0));
        let q = &eig.eigenvectors;
        let covariance = q * DMatrix::from_diagonal(&clipped) * q.transpose();
        let factor = q * DMatrix::from_diagonal(&clipped.map(f64::sqrt));
        Ok(Self {
            mean,
            covariance,
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let g = DVector::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        &self.mean + &self.factor * g
    }
}

fn cholesky_inverse(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| SnipsError::Numeric(format!("{what} is not positive definite")))
}

fn check_problem(prior: &GaussianPrior, op: &LinearOperator, sigma0: f64, y: &DVector<f64>) -> Result<()> {
    check_dim(op.cols(), prior.dim(), "prior")?;
    check_dim(op.rows(), y.len(), "measurement")?;
    if !(sigma0 >= 0.0 && sigma0.is_finite()) {
        return Err(argument(format!("measurement noise must be >= 0, got {sigma0}")));
    }
    Ok(())
}

/// Precision form: `Σ = (C^{-1} + H^T H / σ0²)^{-1}`, `m = Σ (C^{-1} μ + H^T y / σ0²)`.
/// With `σ0 = 0` the limit is taken through [`gaussian_posterior_schur`].
pub fn exact_gaussian_posterior(
    prior: &GaussianPrior,
    op: &LinearOperator,
    sigma0: f64,
    y: &DVector<f64>,
) -> Result<GaussianPosterior> {
    check_problem(prior, op, sigma0, y)?;
    if sigma0 == 0.0 {
        return gaussian_posterior_schur(prior, op, sigma0, y);
    }
    let h = op.matrix();
    let c_inv = cholesky_inverse(prior.covariance().clone(), "prior covariance")?;
    let w = 1.0 / (sigma0 * sigma0);
    let precision = &c_inv + h.tr_mul(h) * w;
    let precision = (&precision + precision.transpose()) * 0.5;
    let chol = precision
        .cholesky()
        .ok_or_else(|| SnipsError::Numeric("posterior precision is not positive definite".into()))?;
    let rhs = &c_inv * prior.mean() + h.tr_mul(y) * w;
    let mean = chol.solve(&rhs);
    let cov = chol.inverse();
    GaussianPosterior::new(mean, cov)
}

/// Joint-Gaussian conditioning: `Σ = C - C H^T S^+ H C`, `m = μ + C H^T S^+ (y - H μ)`
/// with `S = H C H^T + σ0² I`.
pub fn gaussian_posterior_schur(
    prior: &GaussianPrior,
    op: &LinearOperator,
    sigma0: f64,
    y: &DVector<f64>,
) -> Result<GaussianPosterior> {
    check_problem(prior, op, sigma0, y)?;
    let h = op.matrix();
    let c = prior.covariance();
    let ch_t = c * h.transpose();
    let s = h * &ch_t + DMatrix::identity(op.rows(), op.rows()) * (sigma0 * sigma0);
    let s = (&s + s.transpose()) * 0.5;
    let s_inv = if sigma0 > 0.0 {
        cholesky_inverse(s, "measurement covariance")?
    } else {
        let tol = s.amax().max(1.0) * 1e-12;
        s.pseudo_inverse(tol)
            .map_err(|e| SnipsError::Numeric(format!("pseudo-inverse failed: {e}")))?
    };
    let gain = &ch_t * s_inv;
    let mean = prior.mean() + &gain * (y - h * prior.mean());
    let cov = c - &gain * ch_t.transpose();
    GaussianPosterior::new(mean, cov)
}

/// Per-level annealing noise carved out of one measurement noise draw.
#[derive(Debug, Clone)]
pub struct CarvedNoise {
    /// `U^T z`.
    pub z_t: DVector<f64>,
    /// `V^T n_i` for every level, in schedule order.
    pub levels: Vec<DVector<f64>>,
}

impl CarvedNoise {
    /// `z_T - Σ V^T n_i`, the effective noise of the measurement equation at level `i`.
    pub fn overall_noise(&self, level: usize, svd: &DegradationSVD) -> DVector<f64> {
        let n = &self.levels[level];
        let s = svd.singulars();
        DVector::from_fn(self.z_t.len(), |j, _| {
            if j < s.len() {
                self.z_t[j] - s[j] * n[j]
            } else {
                self.z_t[j]
            }
        })
    }

    /// `η_i = n_i - n_{i+1}`, with `n_{L+1} = 0`.
    pub fn increments(&self) -> Vec<DVector<f64>> {
        let mut out: Vec<DVector<f64>> = self
            .levels
            .windows(2)
            .map(|w| &w[0] - &w[1])
            .collect();
        if let Some(last) = self.levels.last() {
            out.push(last.clone());
        }
        out
    }
}

/// Builds `n_i` for every level so that, per coordinate with `s_j > 0`,
/// `s_j n_{i,j}` and `z_{T,j}` are points of one Brownian path in the time
/// variable `s_j² σ²`, with `z_{T,j}` at time `σ0²`.
///
/// Above the crossing the path is extended forward with fresh increments; at
/// or below it, a Brownian bridge pinned at `0` and `z_{T,j}` is sampled. This
/// reproduces `Var(s n - z) = s²σ_i² - σ0²` above and `σ0² - s²σ_i²` below,
/// with the residual independent of `z` above and of `n` below.
/// Coordinates with `s_j = 0` get noise independent of `z`. Coordinates are
/// independent of each other.
pub fn carve_noise_sequence(
    z: &DVector<f64>,
    schedule: &NoiseSchedule,
    svd: &DegradationSVD,
    seed: u64,
) -> Result<CarvedNoise> {
    check_dim(svd.rows(), z.len(), "measurement noise")?;
    let report = validate_crossing(schedule, svd);
    if !report.is_valid() {
        return Err(argument(format!(
            "schedule never crosses sigma0 between consecutive levels for singular indices {:?}",
            report.invalid_indices()
        )));
    }
    let z_t = svd.to_measurement_domain(z)?;
    let n = svd.cols();
    let levels = schedule.levels();
    let l = levels.len();
    let sigma0 = schedule.sigma0();
    let ext = svd.extended_singulars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![DVector::zeros(n); l];

    for j in 0..n {
        let s = ext[j];
        if s == 0.0 {
            let path = independent_path(levels, &mut rng);
            for (i, v) in path.into_iter().enumerate() {
                out[i][j] = v;
            }
            continue;
        }
        let anchor_time = sigma0 * sigma0;
        let anchor = z_t[j];
        let times: Vec<f64> = levels.iter().map(|sig| s * s * sig * sig).collect();
        let split = times.iter().position(|t| *t <= anchor_time).unwrap_or(l);

        // Forward from the anchor through the "greater" levels, smallest time first.
        let (mut t_prev, mut b_prev) = (anchor_time, anchor);
        for i in (0..split).rev() {
            let g: f64 = rng.sample(StandardNormal);
            b_prev += (times[i] - t_prev).sqrt() * g;
            t_prev = times[i];
            out[i][j] = b_prev / s;
        }
        // Bridge from the anchor back towards the origin through the "less" levels.
        let (mut t_prev, mut b_prev) = (anchor_time, anchor);
        for i in split..l {
            let t = times[i];
            let g: f64 = rng.sample(StandardNormal);
            let b = if t_prev > 0.0 {
                b_prev * t / t_prev + (t * (t_prev - t) / t_prev).max(0.0).sqrt() * g
            } else {
                0.0
            };
            t_prev = t;
            b_prev = b;
            out[i][j] = b / s;
        }
    }
    Ok(CarvedNoise { z_t, levels: out })
}

/// One Brownian path in variance time read at `σ_L² < … < σ_1²`, returned in
/// schedule order.
fn independent_path(levels: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut path = vec![0.0; levels.len()];
    let (mut t_prev, mut b) = (0.0, 0.0);
    for i in (0..levels.len()).rev() {
        let t = levels[i] * levels[i];
        let g: f64 = rng.sample(StandardNormal);
        b += (t - t_prev).sqrt() * g;
        t_prev = t;
        path[i] = b;
    }
    path
}

/// Annealing noise drawn without reference to the measurement noise: every
/// coordinate is an independent nested sequence with `Var n_i = σ_i²`.
#[allow(clippy::needless_range_loop)]
pub fn independent_noise_sequence(schedule: &NoiseSchedule, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = schedule.len();
    let mut out = vec![DVector::zeros(n); l];
    for j in 0..n {
        for (i, v) in independent_path(schedule.levels(), &mut rng).into_iter().enumerate() {
            out[i][j] = v;
        }
    }
    out
}

/// `∇_x̃ log p(x̃ | y)` for the scalar model `x ~ N(m, v)`, `x̃ = x + n`,
/// `y = s x + z`, with the `(n, z)` cross covariance of the carved construction.
pub fn gaussian_conditional_score_1d(
    m: f64,
    v: f64,
    s: f64,
    sigma_i: f64,
    sigma0: f64,
    y: f64,
    x_tilde: f64,
) -> f64 {
    let var_n = sigma_i * sigma_i;
    if s == 0.0 {
        return -(x_tilde - m) / (v + var_n);
    }
    let cov_nz = carved_cross_covariance(s, sigma_i, sigma0);
    let vx = v + var_n;
    let vy = s * s * v + sigma0 * sigma0;
    let cxy = s * v + cov_nz;
    let mean = m + cxy / vy * (y - s * m);
    let var = vx - cxy * cxy / vy;
    -(x_tilde - mean) / var
}

/// `Cov(n, z)` per coordinate: `σ0² / s` above the crossing, `s σ_i²` at or below.
pub fn carved_cross_covariance(s: f64, sigma_i: f64, sigma0: f64) -> f64 {
    if sigma_i * s > sigma0 {
        sigma0 * sigma0 / s
    } else {
        s * sigma_i * sigma_i
    }
}

/// Quadrature settings for [`conditional_score_bruteforce`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSpec {
    /// Integration step; `None` picks a tenth of the narrowest scale.
    pub step: Option<f64>,
    /// Half-width in combined standard deviations.
    pub extent: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            step: None,
            extent: 6.0,
        }
    }
}

/// Reference conditional score `∇_x̃ log p(x̃ | y)` for a 1-D or 2-D mixture
/// prior observed through `y_j = s_j x_j + z_j`, `V = U = I`.
///
/// `p(x̃, y) = ∫ p(x) Π_j p(x̃_j, y_j | x_j) dx` is integrated on a uniform grid
/// and differentiated by central differences. Coordinates with `s_j = 0`
/// carry no measurement and their `y_j` is ignored.
pub fn conditional_score_bruteforce(
    prior: &GmmPrior,
    s: &[f64],
    sigma_i: f64,
    sigma0: f64,
    y_t: &[f64],
    points: &[DVector<f64>],
    grid: GridSpec,
) -> Result<Vec<DVector<f64>>> {
    let dim = prior.dim();
    if dim > 2 {
        return Err(argument("brute-force conditional score supports at most 2 dimensions"));
    }
    check_dim(dim, s.len(), "singular values")?;
    check_dim(dim, y_t.len(), "measurement")?;
    if !(sigma_i > 0.0) {
        return Err(argument("annealing level must be positive"));
    }
    let kernels: Vec<PairKernel> = s
        .iter()
        .map(|&sj| PairKernel::new(sj, sigma_i, sigma0))
        .collect::<Result<_>>()?;

    let comp_std = prior
        .components()
        .iter()
        .flat_map(|c| c.eigenvalues().iter().map(|l| l.sqrt()).collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min);
    let mut narrow = sigma_i.min(comp_std);
    for k in &kernels {
        narrow = narrow.min(k.width);
        if k.s > 0.0 {
            narrow = narrow.min(sigma0);
        }
    }
    let step = grid.step.unwrap_or(narrow / 10.0);
    if !(step > 0.0) || step > sigma_i / 10.0 {
        return Err(argument(format!(
            "quadrature step {step} is coarser than sigma_i / 10 = {}",
            sigma_i / 10.0
        )));
    }

    // Axis ranges covering every component by `extent` combined deviations.
    let axes: Vec<Vec<f64>> = (0..dim)
        .map(|d| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for c in prior.components() {
                let sd = (c.covariance()[(d, d)] + sigma_i * sigma_i).sqrt();
                lo = lo.min(c.mean()[d] - grid.extent * sd);
                hi = hi.max(c.mean()[d] + grid.extent * sd);
            }
            let count = ((hi - lo) / step).ceil() as usize + 1;
            (0..count).map(|k| lo + k as f64 * step).collect()
        })
        .collect();
    let nodes: Vec<DVector<f64>> = match dim {
        1 => axes[0].iter().map(|&a| DVector::from_element(1, a)).collect(),
        _ => axes[0]
            .iter()
            .flat_map(|&a| axes[1].iter().map(move |&b| DVector::from_vec(vec![a, b])))
            .collect(),
    };
    let log_prior: Vec<f64> = nodes
        .iter()
        .map(|x| prior.log_density(x, 0.0))
        .collect::<Result<_>>()?;

    let log_joint = |xt: &DVector<f64>| -> f64 {
        let terms: Vec<f64> = nodes
            .iter()
            .zip(&log_prior)
            .map(|(x, lp)| {
                lp + (0..dim)
                    .map(|j| kernels[j].log_pdf(xt[j] - x[j], y_t[j] - kernels[j].s * x[j]))
                    .sum::<f64>()
            })
            .collect();
        log_sum_exp(&terms)
    };

    let h = 1e-3 * kernels.iter().map(|k| k.xt_width).fold(narrow, f64::min);
    points
        .iter()
        .map(|p| {
            check_dim(dim, p.len(), "evaluation point")?;
            Ok(DVector::from_fn(dim, |d, _| {
                let mut a = p.clone();
                let mut b = p.clone();
                a[d] += h;
                b[d] -= h;
                (log_joint(&a) - log_joint(&b)) / (2.0 * h)
            }))
        })
        .collect()
}

/// Joint density of `(n, w)` with `w = y - s x = z` for one coordinate.
struct PairKernel {
    s: f64,
    var_n: f64,
    var_z: f64,
    cov: f64,
    det: f64,
    /// Scale of the kernel along `x` at fixed `x̃`.
    width: f64,
    /// Scale of the kernel along `x̃` at fixed `x`.
    xt_width: f64,
}

impl PairKernel {
    fn new(s: f64, sigma_i: f64, sigma0: f64) -> Result<Self> {
        let var_n = sigma_i * sigma_i;
        if s == 0.0 {
            return Ok(Self {
                s,
                var_n,
                var_z: 0.0,
                cov: 0.0,
                det: var_n,
                width: sigma_i,
                xt_width: sigma_i,
            });
        }
        if !(sigma0 > 0.0) {
            return Err(argument("brute force needs sigma0 > 0 for measured coordinates"));
        }
        let var_z = sigma0 * sigma0;
        let cov = carved_cross_covariance(s, sigma_i, sigma0);
        let det = var_n * var_z - cov * cov;
        if det <= 1e-12 * var_n * var_z {
            return Err(argument(
                "joint noise is degenerate at sigma_i * s = sigma0; move off the boundary",
            ));
        }
        // Width in x of the kernel: sqrt(det / a^T adj(Σ) a) with a = (1, s).
        let width = (det / (var_z - 2.0 * s * cov + s * s * var_n)).sqrt();
        Ok(Self {
            s,
            var_n,
            var_z,
            cov,
            det,
            width,
            xt_width: (det / var_z).sqrt(),
        })
    }

    /// Log density up to a constant shared by all grid nodes.
    fn log_pdf(&self, n: f64, w: f64) -> f64 {
        if self.s == 0.0 {
            return -0.5 * n * n / self.var_n;
        }
        -0.5 * (self.var_z * n * n - 2.0 * self.cov * n * w + self.var_n * w * w) / self.det
    }
}
