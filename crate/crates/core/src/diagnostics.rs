//! Measurement-faithfulness checks and reconstruction metrics.

use std::io::Write;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{argument, check_dim, Result, SnipsError};
use crate::operators::LinearOperator;

/// Minimum sample size for the normality test.
pub const NORMALITY_MIN_SAMPLES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormalityTest {
    pub z_skew: f64,
    pub z_kurtosis: f64,
    /// `K² = z_skew² + z_kurtosis²`.
    pub statistic: f64,
    /// Upper tail of `χ²₂`.
    pub pvalue: f64,
}

fn central_moments(x: &[f64]) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in x {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    (mean, m2 / n, m3 / n, m4 / n)
}

/// D'Agostino–Pearson omnibus test. `None` below
/// [`NORMALITY_MIN_SAMPLES`] or for constant data.
pub fn dagostino_k2(x: &[f64]) -> Option<NormalityTest> {
    let len = x.len();
    if len < NORMALITY_MIN_SAMPLES {
        return None;
    }
    let (_, m2, m3, m4) = central_moments(x);
    if !(m2 > 0.0) || !m2.is_finite() {
        return None;
    }
    let n = len as f64;

    let b1 = m3 / m2.powf(1.5);
    let y = b1 * ((n + 1.0) * (n + 3.0) / (6.0 * (n - 2.0))).sqrt();
    let beta2 = 3.0 * (n * n + 27.0 * n - 70.0) * (n + 1.0) * (n + 3.0)
        / ((n - 2.0) * (n + 5.0) * (n + 7.0) * (n + 9.0));
    let w2 = -1.0 + (2.0 * (beta2 - 1.0)).sqrt();
    let delta = 1.0 / (0.5 * w2.ln()).sqrt();
    let alpha = (2.0 / (w2 - 1.0)).sqrt();
    let z_skew = delta * (y / alpha).asinh();

    let b2 = m4 / (m2 * m2);
    let e = 3.0 * (n - 1.0) / (n + 1.0);
    let var_b2 = 24.0 * n * (n - 2.0) * (n - 3.0) / ((n + 1.0).powi(2) * (n + 3.0) * (n + 5.0));
    let xk = (b2 - e) / var_b2.sqrt();
    let sqrt_beta1 = 6.0 * (n * n - 5.0 * n + 2.0) / ((n + 7.0) * (n + 9.0))
        * (6.0 * (n + 3.0) * (n + 5.0) / (n * (n - 2.0) * (n - 3.0))).sqrt();
    let a = 6.0 + 8.0 / sqrt_beta1 * (2.0 / sqrt_beta1 + (1.0 + 4.0 / (sqrt_beta1 * sqrt_beta1)).sqrt());
    let term1 = 1.0 - 2.0 / (9.0 * a);
    let denom = 1.0 + xk * (2.0 / (a - 4.0)).sqrt();
    if denom == 0.0 {
        return None;
    }
    let term2 = denom.signum() * ((1.0 - 2.0 / a) / denom.abs()).cbrt();
    let z_kurtosis = (term1 - term2) / (2.0 / (9.0 * a)).sqrt();

    let statistic = z_skew * z_skew + z_kurtosis * z_kurtosis;
    Some(NormalityTest {
        z_skew,
        z_kurtosis,
        statistic,
        pvalue: (-0.5 * statistic).exp(),
    })
}

/// Pearson correlation of consecutive entries `(r_k, r_{k+1})`.
pub fn neighbor_correlation(r: &[f64]) -> Option<f64> {
    if r.len() < 3 {
        return None;
    }
    let a = &r[..r.len() - 1];
    let b = &r[1..];
    let k = a.len() as f64;
    let ma = a.iter().sum::<f64>() / k;
    let mb = b.iter().sum::<f64>() / k;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Whether `y - H x̂` looks like white Gaussian noise of std `σ0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaithfulnessReport {
    /// Unbiased sample standard deviation of the residual.
    pub residual_std: f64,
    /// `None` when `M < 20` or the residual is constant.
    pub dagostino_pvalue: Option<f64>,
    /// `None` when the residual is constant or shorter than 3.
    pub neighbor_rho: Option<f64>,
    pub pass_std: bool,
    pub pass_normality: bool,
    pub pass_rho: bool,
}

impl FaithfulnessReport {
    pub fn is_degenerate(&self) -> bool {
        self.residual_std == 0.0
    }

    pub fn passes_all(&self) -> bool {
        self.pass_std && self.pass_normality && self.pass_rho
    }
}

pub fn faithfulness(
    op: &LinearOperator,
    x_hat: &DVector<f64>,
    y: &DVector<f64>,
    sigma0: f64,
) -> Result<FaithfulnessReport> {
    check_dim(op.rows(), y.len(), "measurement")?;
    let r = y - op.apply(x_hat)?;
    faithfulness_of_residual(r.as_slice(), sigma0)
}

/// Faithfulness battery on a precomputed residual. With `σ0 = 0` the std check
/// passes only for an exactly zero residual.
pub fn faithfulness_of_residual(r: &[f64], sigma0: f64) -> Result<FaithfulnessReport> {
    if r.is_empty() {
        return Err(argument("empty residual"));
    }
    if !(sigma0 >= 0.0 && sigma0.is_finite()) {
        return Err(argument(format!("measurement noise must be >= 0, got {sigma0}")));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(SnipsError::Numeric("residual is not finite".into()));
    }
    let m = r.len();
    let residual_std = if m > 1 {
        let (_, m2, _, _) = central_moments(r);
        (m2 * m as f64 / (m - 1) as f64).sqrt()
    } else {
        r[0].abs()
    };
    let pass_std = if sigma0 > 0.0 {
        (residual_std / sigma0 - 1.0).abs() <= 0.05
    } else {
        residual_std == 0.0
    };
    let dagostino_pvalue = dagostino_k2(r).map(|t| t.pvalue);
    let neighbor_rho = neighbor_correlation(r);
    Ok(FaithfulnessReport {
        residual_std,
        dagostino_pvalue,
        neighbor_rho,
        pass_std,
        pass_normality: dagostino_pvalue.is_some_and(|p| p > 0.05),
        pass_rho: neighbor_rho.is_some_and(|rho| rho.abs() < 0.1),
    })
}

/// Writes reports as CSV with one header row named after the report fields.
pub fn write_reports_csv<W: Write>(reports: &[FaithfulnessReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in reports {
        out.serialize(r)
            .map_err(|e| SnipsError::Format(format!("csv: {e}")))?;
    }
    out.flush()?;
    Ok(())
}

/// `10 log10(1 / MSE)` for signals in `[0, 1]`; `+∞` when identical.
pub fn psnr(x: &DVector<f64>, reference: &DVector<f64>) -> Result<f64> {
    check_dim(reference.len(), x.len(), "psnr input")?;
    if x.is_empty() {
        return Err(argument("psnr of empty vectors"));
    }
    let mse = (x - reference).norm_squared() / x.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapReport {
    pub mean_of_sample_psnr: f64,
    pub psnr_of_mean: f64,
    pub gap_db: f64,
}

/// PSNR of the pixelwise mean against the average per-sample PSNR.
pub fn sample_vs_mean_gap(samples: &[DVector<f64>], reference: &DVector<f64>) -> Result<GapReport> {
    if samples.len() < 2 {
        return Err(argument("need at least two samples"));
    }
    let mut mean = DVector::zeros(reference.len());
    let mut total = 0.0;
    for s in samples {
        total += psnr(s, reference)?;
        mean += s;
    }
    mean /= samples.len() as f64;
    let mean_of_sample_psnr = total / samples.len() as f64;
    let psnr_of_mean = psnr(&mean, reference)?;
    let gap_db = if mean_of_sample_psnr.is_infinite() && psnr_of_mean.is_infinite() {
        0.0
    } else {
        psnr_of_mean - mean_of_sample_psnr
    };
    Ok(GapReport {
        mean_of_sample_psnr,
        psnr_of_mean,
        gap_db,
    })
}
