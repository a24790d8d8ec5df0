//! Statistical acceptance suite binding the sampler to its oracles.
//!
//! Every check runs from a seed derived from the suite seed, so a repeated run
//! reproduces the same statistics. Tolerances are fixed up front.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::diagnostics::{dagostino_k2, faithfulness, sample_vs_mean_gap, FaithfulnessReport};
use crate::error::{argument, Result, SnipsError};
use crate::operators::{
    make_block_average, make_random_projection, make_inpainting_mask, make_uniform_blur, svd_decompose,
    Boundary, DegradationSVD, LinearOperator,
};
use crate::oracle::{
    carve_noise_sequence, carved_cross_covariance, conditional_score_bruteforce, exact_gaussian_posterior,
    GaussianPosterior, GridSpec,
};
use crate::priors::{GaussianPrior, GmmPrior};
use crate::sampler::{chain_rng, snips_sample_chain, snips_sample_many, SampleResult, SamplerConfig};
use crate::schedule::{make_geometric_schedule, partition_spectrum, NoiseSchedule, Regime};
use crate::score::{conditional_score, step_sizes, ConditionalScoreInputs};

/// Default suite seed used by the CLI and the acceptance tests.
pub const DEFAULT_SUITE_SEED: u64 = 20_210_512;

/// One line of the suite report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    /// Seconds.
    pub wall_time: f64,
    pub details: String,
}

/// What a single check reports before timing is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    pub details: String,
}

struct Check {
    name: &'static str,
    run: fn(u64) -> Result<Outcome>,
}

const CHECKS: [Check; 8] = [
    Check {
        name: "gaussian_equivalence",
        run: gaussian_equivalence,
    },
    Check {
        name: "variance_law",
        run: variance_law,
    },
    Check {
        name: "score_vs_bruteforce",
        run: score_vs_bruteforce,
    },
    Check {
        name: "step_size_hessian",
        run: step_size_hessian,
    },
    Check {
        name: "faithfulness_battery",
        run: faithfulness_battery,
    },
    Check {
        name: "sample_mean_gap",
        run: sample_mean_gap,
    },
    Check {
        name: "degenerations",
        run: degenerations,
    },
    Check {
        name: "dagostino_calibration",
        run: dagostino_calibration,
    },
];

/// Registered check names in execution order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.name).collect()
}

/// Runs the selected checks (all of them for an empty selection), in
/// registration order. Panics and errors inside a check become failures.
pub fn run_suite<S: AsRef<str>>(selection: &[S], seed: u64) -> Result<Vec<SuiteEntry>> {
    let names = check_names();
    for s in selection {
        if !names.contains(&s.as_ref()) {
            return Err(argument(format!(
                "unknown acceptance test '{}'; available: {}",
                s.as_ref(),
                names.join(", ")
            )));
        }
    }
    let picked: Vec<(usize, &Check)> = CHECKS
        .iter()
        .enumerate()
        .filter(|(_, c)| selection.is_empty() || selection.iter().any(|s| s.as_ref() == c.name))
        .collect();
    Ok(picked
        .into_iter()
        .map(|(i, c)| run_check(c, derive_seed(seed, i)))
        .collect())
}

fn derive_seed(seed: u64, index: usize) -> u64 {
    chain_rng(seed, 1_000 + index as u64).random()
}

fn run_check(check: &Check, seed: u64) -> SuiteEntry {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(|| (check.run)(seed)));
    let wall_time = start.elapsed().as_secs_f64();
    let failed = |details: String| SuiteEntry {
        name: check.name.to_string(),
        statistic: f64::NAN,
        threshold: f64::NAN,
        pass: false,
        wall_time,
        details,
    };
    match outcome {
        Ok(Ok(o)) => SuiteEntry {
            name: check.name.to_string(),
            statistic: o.statistic,
            threshold: o.threshold,
            pass: o.pass,
            wall_time,
            details: o.details,
        },
        Ok(Err(e)) => failed(format!("error: {e}")),
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "non-string panic payload".into());
            failed(format!("panicked: {msg}"))
        }
    }
}

/// JUnit-style XML, one `testcase` per entry.
pub fn junit_xml(entries: &[SuiteEntry]) -> String {
    let failures = entries.iter().filter(|e| !e.pass).count();
    let total: f64 = entries.iter().map(|e| e.wall_time).sum();
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<testsuite name=\"snips-acceptance\" tests=\"{}\" failures=\"{failures}\" time=\"{total:.3}\">",
        entries.len()
    );
    for e in entries {
        let _ = writeln!(
            out,
            "  <testcase classname=\"snips.acceptance\" name=\"{}\" time=\"{:.3}\">",
            xml_escape(&e.name),
            e.wall_time
        );
        let summary = format!("statistic={} threshold={}", e.statistic, e.threshold);
        if !e.pass {
            let _ = writeln!(
                out,
                "    <failure message=\"{}\">{}</failure>",
                xml_escape(&summary),
                xml_escape(&e.details)
            );
        }
        let _ = writeln!(
            out,
            "    <system-out>{}; {}</system-out>",
            xml_escape(&summary),
            xml_escape(&e.details)
        );
        out.push_str("  </testcase>\n");
    }
    out.push_str("</testsuite>\n");
    out
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Fixed-width plain-text table followed by the per-check details.
pub fn text_table(entries: &[SuiteEntry]) -> String {
    let width = entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(4);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>6}  {:>12}  {:>12}  {:>9}",
        "test", "result", "statistic", "threshold", "time [s]"
    );
    for e in entries {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>12.4e}  {:>12.4e}  {:>9.2}",
            e.name,
            if e.pass { "PASS" } else { "FAIL" },
            e.statistic,
            e.threshold,
            e.wall_time
        );
    }
    for e in entries {
        let _ = writeln!(out, "\n[{}] {}", e.name, e.details);
    }
    out
}

// ---------------------------------------------------------------------------
// Shared problem builders

fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal))
        .qr()
        .q()
}

/// Random SPD matrix with trace `n * scale`, plus a small ridge.
fn random_covariance(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let c = &a * a.transpose();
    let norm = n as f64 * scale / c.trace();
    let c = c * norm + DMatrix::identity(n, n) * (0.25 * scale);
    (&c + c.transpose()) * 0.5
}

/// Mean and unbiased covariance of the rows.
fn sample_moments(samples: &[&DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples[0].len();
    let k = samples.len() as f64;
    let mut mean = DVector::zeros(n);
    for s in samples {
        mean += *s;
    }
    mean /= k;
    let mut cov = DMatrix::zeros(n, n);
    for s in samples {
        let d = *s - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    (mean, cov / (k - 1.0))
}

fn successful(chains: &[Result<SampleResult>]) -> Result<Vec<&DVector<f64>>> {
    chains
        .iter()
        .map(|c| c.as_ref().map(|r| &r.sample).map_err(|e| SnipsError::Numeric(format!("chain failed: {e}"))))
        .collect()
}

fn measure(op: &LinearOperator, x: &DVector<f64>, sigma0: f64, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    Ok(op.apply(x)? + normals(rng, op.rows(), sigma0))
}

// ---------------------------------------------------------------------------
// Gaussian-posterior equivalence

const EQUIV_CHAINS: usize = 2_000;

fn gaussian_equivalence(seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_z: f64 = 0.0;
    let mut worst_fro: f64 = 0.0;
    let mut lines = Vec::new();
    for k in 0..5 {
        let sigma0 = if k % 2 == 0 { 0.1 } else { 0.05 };
        let n = rng.random_range(5..=8);
        let m = rng.random_range(3..n);
        // Largest singular starts above the crossing, smallest never reaches
        // it, and `N > M` leaves a null space.
        let r = m.min(n);
        let mut s: Vec<f64> = (0..r)
            .map(|i| match i {
                0 => 1.5,
                i if i == r - 1 => 0.03,
                _ => (rng.random_range(0.04f64.ln()..1.2f64.ln())).exp(),
            })
            .collect();
        s.sort_by(|a, b| b.total_cmp(a));
        let u = random_orthogonal(&mut rng, m);
        let v = random_orthogonal(&mut rng, n);
        let mut sig = DMatrix::zeros(m, n);
        for (j, sj) in s.iter().enumerate() {
            sig[(j, j)] = *sj;
        }
        let op = LinearOperator::new(&u * sig * v.transpose())?;
        let mean = DVector::from_fn(n, |_, _| rng.random_range(0.3..0.7));
        let prior = GaussianPrior::new(mean, random_covariance(&mut rng, n, 0.02))?;
        let x = GaussianPosterior::new(prior.mean().clone(), prior.covariance().clone())?.sample(&mut rng);
        let y = measure(&op, &x, sigma0, &mut rng)?;
        let exact = exact_gaussian_posterior(&prior, &op, sigma0, &y)?;

        let svd = svd_decompose(&op)?;
        let schedule = make_geometric_schedule(1.0, 0.005, 300, sigma0, 0.1, 15)?;
        let first = partition_spectrum(schedule.levels()[0], sigma0, &svd);
        let cfg = SamplerConfig::new(schedule, rng.random());
        let batch = snips_sample_many(&svd, &y, &prior, &cfg, EQUIV_CHAINS)?;
        let samples = successful(&batch.chains)?;
        let (emp_mean, emp_cov) = sample_moments(&samples);
        let z = (0..n)
            .map(|j| {
                let se = (emp_cov[(j, j)] / EQUIV_CHAINS as f64).sqrt();
                (emp_mean[j] - exact.mean[j]).abs() / se
            })
            .fold(0.0, f64::max);
        let fro = (&emp_cov - &exact.covariance).norm() / exact.covariance.norm();
        worst_z = worst_z.max(z);
        worst_fro = worst_fro.max(fro);
        lines.push(format!(
            "problem {k}: N={n} M={m} sigma0={sigma0} regimes at sigma_1 (zero/less/greater)={}/{}/{} max|z|={z:.2} cov_rel={fro:.3}",
            first.zero().len(),
            first.less().len(),
            first.greater().len()
        ));
    }
    Ok(Outcome {
        statistic: worst_z,
        threshold: 3.0,
        pass: worst_z <= 3.0 && worst_fro <= 0.15,
        details: format!(
            "rule: max|z| <= 3 and covariance Frobenius error <= 0.15; worst cov_rel={worst_fro:.3}; {}",
            lines.join("; ")
        ),
    })
}

// ---------------------------------------------------------------------------
// Variance law of the carved noise

const CARVE_DRAWS: usize = 100_000;

fn variance_law(seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for config in 0..2 {
        let sigma0 = rng.random_range(0.05..0.2);
        let n = 5;
        let mut s: Vec<f64> = (0..n).map(|_| rng.random_range(0.2f64.ln()..5.0f64.ln()).exp()).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        let svd = DegradationSVD::from_parts(
            DMatrix::identity(n, n),
            DVector::from_vec(s.clone()),
            DMatrix::identity(n, n),
        )?;
        // Every coordinate crosses strictly between the first and last level.
        let hi = 2.0 * sigma0 / s[n - 1];
        let lo = 0.5 * sigma0 / s[0];
        let schedule = make_geometric_schedule(hi, lo, 12, sigma0, 0.1, 1)?;
        let levels = schedule.levels().to_vec();
        let mut sq = DMatrix::<f64>::zeros(levels.len(), n);
        let mut sum = DMatrix::<f64>::zeros(levels.len(), n);
        for _ in 0..CARVE_DRAWS {
            let z = normals(&mut rng, n, sigma0);
            let carved = carve_noise_sequence(&z, &schedule, &svd, rng.random())?;
            for i in 0..levels.len() {
                let e = carved.overall_noise(i, &svd);
                for j in 0..n {
                    sum[(i, j)] += e[j];
                    sq[(i, j)] += e[j] * e[j];
                }
            }
        }
        let k = CARVE_DRAWS as f64;
        let mut cfg_worst: f64 = 0.0;
        for (i, &sigma_i) in levels.iter().enumerate() {
            for j in 0..n {
                let want = (s[j] * s[j] * sigma_i * sigma_i - sigma0 * sigma0).abs();
                let mean = sum[(i, j)] / k;
                let var = (sq[(i, j)] - k * mean * mean) / (k - 1.0);
                cfg_worst = cfg_worst.max((var / want - 1.0).abs());
            }
        }
        worst = worst.max(cfg_worst);
        lines.push(format!(
            "config {config}: sigma0={sigma0:.4} s={:?} levels={} max_rel={cfg_worst:.4}",
            s.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            levels.len()
        ));
    }
    Ok(Outcome {
        statistic: worst,
        threshold: 0.02,
        pass: worst <= 0.02,
        details: format!(
            "rule: max relative variance error <= 0.02 over {CARVE_DRAWS} draws; {}",
            lines.join("; ")
        ),
    })
}

// ---------------------------------------------------------------------------
// Conditional score against quadrature

fn scalar_svd(s: f64) -> Result<DegradationSVD> {
    DegradationSVD::from_parts(DMatrix::identity(1, 1), DVector::from_element(1, s), DMatrix::identity(1, 1))
}

fn random_mixture_1d(rng: &mut ChaCha8Rng, k: usize) -> Result<GmmPrior> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    let comps = (0..k)
        .map(|_| {
            GaussianPrior::new(
                DVector::from_element(1, rng.random_range(0.0..1.0)),
                DMatrix::from_element(1, 1, rng.random_range(0.003..0.03)),
            )
        })
        .collect::<Result<_>>()?;
    GmmPrior::new(weights, comps)
}

/// `max |a - b| / max |b|` over the evaluation points.
fn score_error(prior: &GmmPrior, s: f64, sigma_i: f64, sigma0: f64, y: f64) -> Result<f64> {
    let svd = scalar_svd(s)?;
    let center = y / s;
    let width = sigma_i + 0.1;
    let points: Vec<DVector<f64>> = (0..9)
        .map(|p| DVector::from_element(1, center + width * (p as f64 - 4.0) / 2.0))
        .collect();
    let grid = GridSpec {
        step: None,
        extent: 8.0,
    };
    let reference = conditional_score_bruteforce(prior, &[s], sigma_i, sigma0, &[y], &points, grid)?;
    let partition = partition_spectrum(sigma_i, sigma0, &svd);
    let y_t = DVector::from_element(1, y);
    let mut num: f64 = 0.0;
    let mut den: f64 = 0.0;
    for (p, want) in points.iter().zip(&reference) {
        let got = conditional_score(
            &ConditionalScoreInputs {
                y_t: &y_t,
                x: p,
                sigma_i,
                sigma0,
                svd: &svd,
                prior,
            },
            &partition,
        )?;
        num = num.max((got.d[0] - want[0]).abs());
        den = den.max(want[0].abs());
    }
    Ok(num / den)
}

fn score_vs_bruteforce(seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma0 = 0.1;
    let (mut greater, mut less, mut single): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for problem in 0..5 {
        let k = if problem == 0 { 1 } else { 3 };
        let prior = random_mixture_1d(&mut rng, k)?;
        let s = rng.random_range(0.5..2.0);
        let x = prior.components()[0].mean()[0];
        let y = s * x + sigma0 * rng.sample::<f64, _>(StandardNormal);
        for factor in [10.0, 3.0, 1.5, 0.6, 0.2] {
            let sigma_i = factor * sigma0 / s;
            let err = score_error(&prior, s, sigma_i, sigma0, y)?;
            if k == 1 {
                single = single.max(err);
            } else if factor > 1.0 {
                greater = greater.max(err);
            } else {
                less = less.max(err);
            }
        }
    }
    let ratio = (greater / 0.05).max(less / 0.10).max(single / 1e-6);
    Ok(Outcome {
        statistic: ratio,
        threshold: 1.0,
        pass: ratio <= 1.0,
        details: format!(
            "rule: greater <= 0.05, less <= 0.10, single Gaussian <= 1e-6 (statistic is the worst error/tolerance); \
             greater={greater:.3e} less={less:.3e} single={single:.3e}"
        ),
    })
}

// ---------------------------------------------------------------------------
// Step sizes against the finite-difference Hessian

/// Conditional law of `V^T x̃` given `U^T y` for a Gaussian prior and the carved
/// noise covariance, as (mean, precision).
fn spectral_conditional(
    svd: &DegradationSVD,
    prior: &GaussianPrior,
    y: &DVector<f64>,
    sigma_i: f64,
    sigma0: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (m, n) = (svd.rows(), svd.cols());
    let v = svd.v();
    let c_t = v.transpose() * prior.covariance() * v;
    let mu_t = v.tr_mul(prior.mean());
    let y_t = svd.u().tr_mul(y);
    let mut sig = DMatrix::zeros(m, n);
    let mut cross = DMatrix::zeros(n, m);
    for (j, s) in svd.singulars().iter().enumerate() {
        sig[(j, j)] = *s;
        cross[(j, j)] = carved_cross_covariance(*s, sigma_i, sigma0);
    }
    let cxx = &c_t + DMatrix::identity(n, n) * (sigma_i * sigma_i);
    let cyy = &sig * &c_t * sig.transpose() + DMatrix::identity(m, m) * (sigma0 * sigma0);
    let cxy = &c_t * sig.transpose() + cross;
    let cyy_inv = cyy
        .try_inverse()
        .ok_or_else(|| SnipsError::Numeric("measurement covariance is singular".into()))?;
    let gain = &cxy * cyy_inv;
    let mean = &mu_t + &gain * (y_t - &sig * &mu_t);
    let cov = cxx - &gain * cxy.transpose();
    let precision = cov
        .try_inverse()
        .ok_or_else(|| SnipsError::Numeric("conditional covariance is singular".into()))?;
    Ok((mean, precision))
}

fn step_size_hessian(seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n, sigma0) = (2, 3, 0.1);
    let u = random_orthogonal(&mut rng, m);
    let v = random_orthogonal(&mut rng, n);
    let mut sig = DMatrix::zeros(m, n);
    sig[(0, 0)] = 2.0;
    sig[(1, 1)] = 0.5;
    let svd = svd_decompose(&LinearOperator::new(&u * sig * v.transpose())?)?;
    let y = normals(&mut rng, m, 0.5);
    let mut worst: f64 = 0.0;
    let mut seen = [false; 3];
    let mut lines = Vec::new();
    for sigma_i in [0.3, 0.1, 0.02] {
        // The Newton step assumes the smoothed prior is flat next to the noise,
        // so the prior variance sits far below σ_i².
        let cov = random_covariance(&mut rng, n, 1e-8 * sigma_i * sigma_i);
        let prior = GaussianPrior::new(normals(&mut rng, n, 0.3), cov)?;
        let (mean, precision) = spectral_conditional(&svd, &prior, &y, sigma_i, sigma0)?;
        let log_p = |x: &DVector<f64>| {
            let d = x - &mean;
            -0.5 * d.dot(&(&precision * &d))
        };
        let partition = partition_spectrum(sigma_i, sigma0, &svd);
        let alpha = step_sizes(sigma_i, sigma0, &svd, &partition);
        let x0 = mean.map(|m| m + 0.3 * sigma_i);
        let mut level_worst: f64 = 0.0;
        for j in 0..n {
            let h = 0.1 * alpha.values[j].sqrt();
            let mut plus = x0.clone();
            plus[j] += h;
            let mut minus = x0.clone();
            minus[j] -= h;
            let hess = (log_p(&plus) - 2.0 * log_p(&x0) + log_p(&minus)) / (h * h);
            let want = -1.0 / hess;
            level_worst = level_worst.max((alpha.values[j] - want).abs() / want);
            seen[match partition.regime(j) {
                Regime::Zero => 0,
                Regime::Less => 1,
                Regime::Greater => 2,
            }] = true;
        }
        worst = worst.max(level_worst);
        lines.push(format!("sigma_i={sigma_i}: {:?} max_rel={level_worst:.2e}", partition.regimes()));
    }
    let covered = seen.iter().all(|s| *s);
    Ok(Outcome {
        statistic: worst,
        threshold: 1e-4,
        pass: worst <= 1e-4 && covered,
        details: format!(
            "rule: relative error <= 1e-4 with all three regimes covered (covered={covered}); prior variance 1e-8 sigma_i^2; {}",
            lines.join("; ")
        ),
    })
}

// ---------------------------------------------------------------------------
// Image-scale problems

const SIDE: usize = 16;

fn image_prior() -> Result<GaussianPrior> {
    GaussianPrior::stationary(SIDE, 0.5, 0.04, 2.0)
}

fn image_schedule(sigma0: f64) -> Result<NoiseSchedule> {
    make_geometric_schedule(1.0, 0.005, 200, sigma0, 0.1, 10)
}

fn image_operator(task: &str, rng: &mut ChaCha8Rng) -> Result<LinearOperator> {
    let n = SIDE * SIDE;
    match task {
        "denoise" => LinearOperator::identity(n),
        "deblur" => make_uniform_blur(SIDE, 3, Boundary::Circular),
        "sr" => make_block_average(SIDE, 2),
        "cs" => make_random_projection(n, 0.5, rng.random()),
        "inpaint" => {
            let kept: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < 0.6).collect();
            make_inpainting_mask(n, &kept)
        }
        other => Err(argument(format!("unknown task {other}"))),
    }
}

struct FaithCount {
    std: usize,
    rho: usize,
    normal: usize,
    total: usize,
}

impl FaithCount {
    fn new() -> Self {
        Self {
            std: 0,
            rho: 0,
            normal: 0,
            total: 0,
        }
    }

    fn add(&mut self, r: &FaithfulnessReport) {
        self.total += 1;
        self.std += r.pass_std as usize;
        self.rho += r.pass_rho as usize;
        self.normal += r.pass_normality as usize;
    }

    fn summary(&self) -> String {
        format!(
            "std {}/{}, rho {}/{}, normality {}/{}",
            self.std, self.total, self.rho, self.total, self.normal, self.total
        )
    }
}

const FAITH_RUNS: usize = 20;

fn faithfulness_battery(seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prior = image_prior()?;
    let prior_law = GaussianPosterior::new(prior.mean().clone(), prior.covariance().clone())?;
    let sigma0 = 0.05;
    let mut snips = FaithCount::new();
    let mut exact = FaithCount::new();
    let mut lines = Vec::new();
    for task in ["deblur", "sr", "cs"] {
        let op = image_operator(task, &mut rng)?;
        let svd = svd_decompose(&op)?;
        let cfg = SamplerConfig::new(image_schedule(sigma0)?, rng.random());
        let mut task_count = FaithCount::new();
        for run in 0..FAITH_RUNS {
            let x = prior_law.sample(&mut rng);
            let y = measure(&op, &x, sigma0, &mut rng)?;
            let sample = snips_sample_chain(&svd, &y, &prior, &cfg, run as u64)?.sample;
            let report = faithfulness(&op, &sample, &y, sigma0)?;
            snips.add(&report);
            task_count.add(&report);
            let reference = exact_gaussian_posterior(&prior, &op, sigma0, &y)?.sample(&mut rng);
            exact.add(&faithfulness(&op, &reference, &y, sigma0)?);
        }
        lines.push(format!("{task} (M={}): {}", op.rows(), task_count.summary()));
    }
    let total = snips.total as f64;
    let std_rate = snips.std as f64 / total;
    let normal_rate = snips.normal as f64 / total;
    let pass = std_rate >= 0.95 && snips.rho == snips.total && normal_rate >= 0.85;
    Ok(Outcome {
        statistic: std_rate,
        threshold: 0.95,
        pass,
        details: format!(
            "rule: std pass rate >= 0.95, rho pass in every run, normality rate >= 0.85; sampler: {}; {}; \
             exact posterior draws on the same measurements: {}",
            snips.summary(),
            lines.join("; "),
            exact.summary()
        ),
    })
}

const GAP_CHAINS: usize = 8;

fn sample_mean_gap(seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prior = image_prior()?;
    let prior_law = GaussianPosterior::new(prior.mean().clone(), prior.covariance().clone())?;
    let sigma0 = 0.1;
    let mut inside = 0;
    let mut lines = Vec::new();
    for task in ["denoise", "deblur", "sr", "cs", "inpaint"] {
        let op = image_operator(task, &mut rng)?;
        let svd = svd_decompose(&op)?;
        let x = prior_law.sample(&mut rng);
        let y = measure(&op, &x, sigma0, &mut rng)?;
        let cfg = SamplerConfig::new(image_schedule(sigma0)?, rng.random());
        let batch = snips_sample_many(&svd, &y, &prior, &cfg, GAP_CHAINS)?;
        let samples: Vec<DVector<f64>> = successful(&batch.chains)?.into_iter().cloned().collect();
        let gap = sample_vs_mean_gap(&samples, &x)?;
        let ok = (1.5..=3.5).contains(&gap.gap_db);
        inside += ok as usize;
        lines.push(format!(
            "{task}: sample {:.2} dB, mean {:.2} dB, gap {:.2} dB",
            gap.mean_of_sample_psnr, gap.psnr_of_mean, gap.gap_db
        ));
    }
    Ok(Outcome {
        statistic: inside as f64,
        threshold: 4.0,
        pass: inside >= 4,
        details: format!("rule: gap in [1.5, 3.5] dB on at least 4 of 5; {}", lines.join("; ")),
    })
}

// ---------------------------------------------------------------------------
// Degenerate operators

const DENOISE_CHAINS: usize = 4_000;
const SYNTH_CHAINS: usize = 2_000;
const REPLAY_CHAINS: usize = 100;

fn same_samples(a: &[Result<SampleResult>], b: &[Result<SampleResult>]) -> bool {
    a.iter().zip(b).all(|(a, b)| match (a, b) {
        (Ok(a), Ok(b)) => a.sample == b.sample,
        _ => false,
    })
}

fn degenerations(seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // H = I in one dimension against the scalar posterior.
    let (m0, v0, sigma0) = (0.5, 0.04, 0.1);
    let y = DVector::from_element(1, m0 + rng.random_range(-0.3..0.3));
    let post_var = 1.0 / (1.0 / v0 + 1.0 / (sigma0 * sigma0));
    let post_mean = post_var * (m0 / v0 + y[0] / (sigma0 * sigma0));
    let prior = GaussianPrior::isotropic(1, m0, v0)?;
    let svd = svd_decompose(&LinearOperator::identity(1)?)?;
    let cfg = SamplerConfig::new(make_geometric_schedule(1.0, 0.005, 500, sigma0, 0.1, 20)?, rng.random());
    let batch = snips_sample_many(&svd, &y, &prior, &cfg, DENOISE_CHAINS)?;
    let samples = successful(&batch.chains)?;
    let (mean, cov) = sample_moments(&samples);
    let z = (mean[0] - post_mean).abs() / (cov[(0, 0)] / DENOISE_CHAINS as f64).sqrt();
    let std_rel = (cov[(0, 0)].sqrt() / post_var.sqrt() - 1.0).abs();
    let replay = snips_sample_many(&svd, &y, &prior, &cfg, REPLAY_CHAINS)?;
    let denoise_repro = same_samples(&replay.chains, &batch.chains);

    // H = 0, σ0 = 0 against the mixture weights.
    let weights = vec![0.5, 0.3, 0.2];
    let centers = [[0.0, 0.0], [1.0, 0.0], [0.5, 0.9]];
    let comps = centers
        .iter()
        .map(|c| GaussianPrior::new(DVector::from_row_slice(c), DMatrix::identity(2, 2) * 0.01))
        .collect::<Result<_>>()?;
    let gmm = GmmPrior::new(weights.clone(), comps)?;
    let svd0 = svd_decompose(&LinearOperator::zeros(2, 2)?)?;
    let y0 = DVector::zeros(2);
    let cfg0 = SamplerConfig::new(make_geometric_schedule(2.0, 0.005, 200, 0.0, 0.1, 10)?, rng.random());
    let synth = snips_sample_many(&svd0, &y0, &gmm, &cfg0, SYNTH_CHAINS)?;
    let mut counts = vec![0usize; weights.len()];
    for s in successful(&synth.chains)? {
        let r = gmm.responsibilities(s, 0.0)?;
        let best = (0..r.len()).max_by(|a, b| r[*a].total_cmp(&r[*b])).unwrap_or(0);
        counts[best] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(&weights)
        .map(|(c, w)| {
            let e = w * SYNTH_CHAINS as f64;
            (*c as f64 - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((weights.len() - 1) as f64)
        .map_err(|e| SnipsError::Numeric(format!("chi-square: {e}")))?;
    let pvalue = 1.0 - dist.cdf(chi2);
    let replay0 = snips_sample_many(&svd0, &y0, &gmm, &cfg0, REPLAY_CHAINS)?;
    let synth_repro = same_samples(&replay0.chains, &synth.chains);

    let pass = z <= 3.0 && std_rel <= 0.05 && pvalue > 0.01 && denoise_repro && synth_repro;
    Ok(Outcome {
        statistic: pvalue,
        threshold: 0.01,
        pass,
        details: format!(
            "rule: denoising mean within 3 SE and std within 5%, occupancy chi-square p > 0.01, replays identical; \
             denoise: mean {:.5} vs {post_mean:.5} (|z|={z:.2}), std {:.5} vs {:.5} (rel {std_rel:.3}), replay={denoise_repro}; \
             synthesis: counts {counts:?} for weights {weights:?}, chi2={chi2:.3}, p={pvalue:.3}, replay={synth_repro}",
            mean[0],
            cov[(0, 0)].sqrt(),
            post_var.sqrt()
        ),
    })
}

// ---------------------------------------------------------------------------
// Normality-test calibration

const CALIBRATION_TRIALS: usize = 10_000;
const CALIBRATION_SIZE: usize = 4_096;

fn dagostino_calibration(seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; CALIBRATION_SIZE];
    let mut rejected = 0;
    for _ in 0..CALIBRATION_TRIALS {
        for v in buf.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let t = dagostino_k2(&buf).ok_or_else(|| SnipsError::Numeric("normality test undefined".into()))?;
        rejected += (t.pvalue <= 0.05) as usize;
    }
    let rate = rejected as f64 / CALIBRATION_TRIALS as f64;
    let deviation = (rate - 0.05).abs();
    Ok(Outcome {
        statistic: deviation,
        threshold: 0.015,
        pass: deviation <= 0.015,
        details: format!(
            "rule: |rejection rate - 0.05| <= 0.015; rejected {rejected} of {CALIBRATION_TRIALS} at M={CALIBRATION_SIZE} (rate {rate:.4})"
        ),
    })
}
