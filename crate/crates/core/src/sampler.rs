//! The annealed Langevin loop with the conditional score and per-coordinate
//! step sizes.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{argument, check_dim, Result, SnipsError};
use crate::operators::DegradationSVD;
use crate::priors::ScoreModel;
use crate::schedule::{partition_singulars, NoiseSchedule};
use crate::score::{assemble, fill_step_sizes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum TracePolicy {
    #[default]
    None,
    PerLevel,
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum Init {
    /// Independent `U[0, 1]` pixels.
    #[default]
    Uniform01,
    Provided(DVector<f64>),
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub seed: u64,
    pub trace: TracePolicy,
    pub init: Init,
}

impl SamplerConfig {
    pub fn new(schedule: NoiseSchedule, seed: u64) -> Self {
        Self {
            schedule,
            seed,
            trace: TracePolicy::None,
            init: Init::Uniform01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelDiagnostics {
    pub level: usize,
    pub sigma: f64,
    /// Mean of `|d_j|` over coordinates and inner steps.
    pub mean_abs_d: f64,
    pub step_floor_hits: usize,
    pub boundary_hits: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSnapshot {
    pub level: usize,
    /// `None` for end-of-level snapshots.
    pub step: Option<usize>,
    pub x: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub sample: DVector<f64>,
    pub trace: Vec<TraceSnapshot>,
    pub rng_seed_used: u64,
    /// ChaCha stream index of this chain under `rng_seed_used`.
    pub chain: u64,
    pub diagnostics: Vec<LevelDiagnostics>,
}

/// Independent per-chain generator: chain `k` reads stream `k` of the master
/// seed, so adding chains never shifts an existing chain's draws.
pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

struct Problem<'a> {
    svd: &'a DegradationSVD,
    y_t: DVector<f64>,
    prior: &'a dyn ScoreModel,
}

impl<'a> Problem<'a> {
    fn new(svd: &'a DegradationSVD, y: &DVector<f64>, prior: &'a dyn ScoreModel) -> Result<Self> {
        check_dim(svd.cols(), prior.dim(), "prior")?;
        let y_t = svd.to_measurement_domain(y)?;
        Ok(Self { svd, y_t, prior })
    }
}

/// Runs one chain (stream 0 of `cfg.seed`).
pub fn snips_sample(
    svd: &DegradationSVD,
    y: &DVector<f64>,
    prior: &dyn ScoreModel,
    cfg: &SamplerConfig,
) -> Result<SampleResult> {
    let problem = Problem::new(svd, y, prior)?;
    run_chain(&problem, cfg, 0)
}

/// Runs one chain on stream `chain` of `cfg.seed`.
pub fn snips_sample_chain(
    svd: &DegradationSVD,
    y: &DVector<f64>,
    prior: &dyn ScoreModel,
    cfg: &SamplerConfig,
    chain: u64,
) -> Result<SampleResult> {
    let problem = Problem::new(svd, y, prior)?;
    run_chain(&problem, cfg, chain)
}

fn run_chain(problem: &Problem<'_>, cfg: &SamplerConfig, chain: u64) -> Result<SampleResult> {
    let svd = problem.svd;
    let n = svd.cols();
    let v = svd.v();
    let ext = svd.extended_singulars().as_slice();
    let schedule = &cfg.schedule;
    let (c, tau, sigma0) = (schedule.c(), schedule.tau(), schedule.sigma0());
    let noise_scale = (2.0 * c).sqrt();

    let mut rng = chain_rng(cfg.seed, chain);
    let x0 = match &cfg.init {
        Init::Uniform01 => DVector::from_fn(n, |_, _| rng.random::<f64>()),
        Init::Provided(x) => {
            check_dim(n, x.len(), "initial iterate")?;
            x.clone()
        }
    };
    let mut x_t = svd.to_spectral(&x0)?;
    let mut x_sig = DVector::zeros(n);
    let mut prior_t = DVector::zeros(n);
    let mut d = DVector::zeros(n);
    let mut alpha = DVector::zeros(n);
    let mut trace = Vec::new();
    let mut diagnostics = Vec::with_capacity(schedule.len());

    for (level, &sigma_i) in schedule.levels().iter().enumerate() {
        let partition = partition_singulars(level, sigma_i, sigma0, ext);
        let step_floor_hits = fill_step_sizes(&partition, ext, sigma_i, sigma0, alpha.as_mut_slice());
        let drift: DVector<f64> = alpha.map(|a| c * a);
        let spread: DVector<f64> = alpha.map(|a| noise_scale * a.sqrt());
        let needs_prior = partition.needs_prior();
        let mut boundary_hits = 0;
        let mut abs_d = 0.0;

        for step in 0..tau {
            if needs_prior {
                x_sig.gemv(1.0, v, &x_t, 0.0);
                let s = problem.prior.score(&x_sig, sigma_i)?;
                check_dim(n, s.len(), "prior score")?;
                if s.iter().any(|v| !v.is_finite()) {
                    return Err(SnipsError::Numeric(format!(
                        "prior score is not finite at level {level}, step {step}"
                    )));
                }
                prior_t.gemv_tr(1.0, v, &s, 0.0);
            }
            boundary_hits += assemble(
                &partition,
                ext,
                problem.y_t.as_slice(),
                x_t.as_slice(),
                needs_prior.then_some(prior_t.as_slice()),
                sigma_i,
                sigma0,
                d.as_mut_slice(),
            );
            abs_d += d.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
            let mut finite = true;
            for j in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                x_t[j] += drift[j] * d[j] + spread[j] * z;
                finite &= x_t[j].is_finite();
            }
            if !finite {
                return Err(SnipsError::Divergence { level, step });
            }
            if cfg.trace == TracePolicy::PerStep {
                trace.push(TraceSnapshot {
                    level,
                    step: Some(step),
                    x: v * &x_t,
                });
            }
        }
        if cfg.trace == TracePolicy::PerLevel {
            trace.push(TraceSnapshot {
                level,
                step: None,
                x: v * &x_t,
            });
        }
        diagnostics.push(LevelDiagnostics {
            level,
            sigma: sigma_i,
            mean_abs_d: abs_d / tau as f64,
            step_floor_hits,
            boundary_hits,
        });
    }

    Ok(SampleResult {
        sample: v * &x_t,
        trace,
        rng_seed_used: cfg.seed,
        chain,
        diagnostics,
    })
}

/// Results of several chains plus pixelwise statistics over the ones that finished.
#[derive(Debug)]
pub struct SampleBatch {
    pub chains: Vec<Result<SampleResult>>,
    pub mean: Option<DVector<f64>>,
    /// Population (`ddof = 0`) standard deviation.
    pub std: Option<DVector<f64>>,
}

impl SampleBatch {
    pub fn samples(&self) -> Vec<&DVector<f64>> {
        self.chains
            .iter()
            .filter_map(|c| c.as_ref().ok().map(|r| &r.sample))
            .collect()
    }

    pub fn failures(&self) -> usize {
        self.chains.iter().filter(|c| c.is_err()).count()
    }
}

/// Runs `count` chains in parallel on the current rayon pool.
pub fn snips_sample_many(
    svd: &DegradationSVD,
    y: &DVector<f64>,
    prior: &dyn ScoreModel,
    cfg: &SamplerConfig,
    count: usize,
) -> Result<SampleBatch> {
    if count == 0 {
        return Err(argument("need at least one chain"));
    }
    let problem = Problem::new(svd, y, prior)?;
    let chains: Vec<Result<SampleResult>> = (0..count as u64)
        .into_par_iter()
        .map(|k| run_chain(&problem, cfg, k))
        .collect();
    let (mean, std) = aggregate(
        chains
            .iter()
            .filter_map(|c| c.as_ref().ok().map(|r| &r.sample)),
    );
    Ok(SampleBatch { chains, mean, std })
}

/// Pixelwise mean and population std; `None` for an empty set.
pub fn aggregate<'a, I>(samples: I) -> (Option<DVector<f64>>, Option<DVector<f64>>)
where
    I: IntoIterator<Item = &'a DVector<f64>>,
{
    let samples: Vec<&DVector<f64>> = samples.into_iter().collect();
    let Some(first) = samples.first() else {
        return (None, None);
    };
    let k = samples.len() as f64;
    let mut mean = DVector::zeros(first.len());
    for s in &samples {
        mean += *s;
    }
    mean /= k;
    let mut var = DVector::zeros(first.len());
    for s in &samples {
        let dev = *s - &mean;
        var += dev.component_mul(&dev);
    }
    var /= k;
    (Some(mean), Some(var.map(f64::sqrt)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{svd_decompose, LinearOperator};
    use crate::priors::GaussianPrior;
    use crate::schedule::{make_geometric_schedule, partition_spectrum};
    use crate::score::{conditional_score, step_sizes, ConditionalScoreInputs};
    use nalgebra::DMatrix;

    fn small_problem() -> (DegradationSVD, GaussianPrior, DVector<f64>) {
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, 0.0, 0.3, 0.2]);
        let svd = svd_decompose(&LinearOperator::new(h).unwrap()).unwrap();
        let prior = GaussianPrior::new(
            DVector::from_vec(vec![0.5, 0.4, 0.6]),
            DMatrix::from_row_slice(3, 3, &[0.05, 0.01, 0.0, 0.01, 0.04, 0.01, 0.0, 0.01, 0.06]),
        )
        .unwrap();
        (svd, prior, DVector::from_vec(vec![0.7, 0.25]))
    }

    fn schedule(sigma0: f64) -> NoiseSchedule {
        make_geometric_schedule(2.0, 0.01, 30, sigma0, 0.1, 3).unwrap()
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let (svd, prior, y) = small_problem();
        let mut cfg = SamplerConfig::new(schedule(0.1), 42);
        cfg.trace = TracePolicy::PerLevel;
        let a = snips_sample(&svd, &y, &prior, &cfg).unwrap();
        let b = snips_sample(&svd, &y, &prior, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.len(), 30);
        assert_eq!(a.diagnostics.len(), 30);
        assert!(a.sample.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn chains_are_distinct_and_stable() {
        let (svd, prior, y) = small_problem();
        let cfg = SamplerConfig::new(schedule(0.1), 7);
        let batch = snips_sample_many(&svd, &y, &prior, &cfg, 4).unwrap();
        let samples = batch.samples();
        assert_eq!(samples.len(), 4);
        assert_ne!(samples[0], samples[1]);
        let solo = snips_sample(&svd, &y, &prior, &cfg).unwrap();
        assert_eq!(&solo.sample, samples[0]);
        let third = snips_sample_chain(&svd, &y, &prior, &cfg, 2).unwrap();
        assert_eq!(&third.sample, samples[2]);
        let bigger = snips_sample_many(&svd, &y, &prior, &cfg, 6).unwrap();
        assert_eq!(bigger.samples()[3], samples[3]);
    }

    #[test]
    fn single_chain_aggregate() {
        let (svd, prior, y) = small_problem();
        let cfg = SamplerConfig::new(schedule(0.1), 1);
        let batch = snips_sample_many(&svd, &y, &prior, &cfg, 1).unwrap();
        assert_eq!(batch.mean.as_ref().unwrap(), batch.samples()[0]);
        assert_eq!(batch.std.unwrap(), DVector::zeros(3));
        assert!(snips_sample_many(&svd, &y, &prior, &cfg, 0).is_err());
    }

    #[test]
    fn dimension_errors() {
        let (svd, prior, _) = small_problem();
        let cfg = SamplerConfig::new(schedule(0.1), 1);
        assert!(matches!(
            snips_sample(&svd, &DVector::zeros(3), &prior, &cfg),
            Err(SnipsError::Dimension { .. })
        ));
        let mut cfg = cfg;
        cfg.init = Init::Provided(DVector::zeros(2));
        assert!(snips_sample(&svd, &DVector::zeros(2), &prior, &cfg).is_err());
    }

    /// Algorithm loop written directly in signal space, rotating every step.
    fn signal_space_reference(
        svd: &DegradationSVD,
        y: &DVector<f64>,
        prior: &GaussianPrior,
        cfg: &SamplerConfig,
    ) -> DVector<f64> {
        let n = svd.cols();
        let s = &cfg.schedule;
        let mut rng = chain_rng(cfg.seed, 0);
        let mut x = DVector::from_fn(n, |_, _| rng.random::<f64>());
        let y_t = svd.u().tr_mul(y);
        for &sigma_i in s.levels() {
            let p = partition_spectrum(sigma_i, s.sigma0(), svd);
            let a = step_sizes(sigma_i, s.sigma0(), svd, &p).values;
            for _ in 0..s.tau() {
                let d = conditional_score(
                    &ConditionalScoreInputs {
                        y_t: &y_t,
                        x: &x,
                        sigma_i,
                        sigma0: s.sigma0(),
                        svd,
                        prior,
                    },
                    &p,
                )
                .unwrap()
                .d;
                let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let step = a.component_mul(&d) * s.c()
                    + a.map(f64::sqrt).component_mul(&z) * (2.0 * s.c()).sqrt();
                x += svd.v() * step;
            }
        }
        x
    }

    #[test]
    fn spectral_iterate_matches_signal_space_loop() {
        let (svd, prior, y) = small_problem();
        let cfg = SamplerConfig::new(schedule(0.1), 99);
        let fast = snips_sample(&svd, &y, &prior, &cfg).unwrap().sample;
        let slow = signal_space_reference(&svd, &y, &prior, &cfg);
        assert!((fast - slow).amax() < 1e-10);
    }

    struct ZeroScore(usize);

    impl ScoreModel for ZeroScore {
        fn dim(&self) -> usize {
            self.0
        }
        fn score(&self, _: &DVector<f64>, _: f64) -> Result<DVector<f64>> {
            Ok(DVector::zeros(self.0))
        }
    }

    #[test]
    fn injected_noise_has_the_preconditioned_spread() {
        // Diagonal operator with V = I: one zero, one greater, one less coordinate.
        let svd = DegradationSVD::from_parts(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![2.0, 0.05]),
            DMatrix::identity(3, 3),
        )
        .unwrap();
        let (sigma_i, sigma0, c) = (0.5, 0.1, 0.2);
        let sched = NoiseSchedule::new(vec![sigma_i], sigma0, c, 1).unwrap();
        let p = partition_spectrum(sigma_i, sigma0, &svd);
        assert_eq!((p.greater(), p.less(), p.zero()), (&[0][..], &[1][..], &[2][..]));
        let alpha = step_sizes(sigma_i, sigma0, &svd, &p).values;
        let prior = ZeroScore(3);
        let y = DVector::zeros(2);
        let draws = 100_000;
        let mut sum_sq = DVector::<f64>::zeros(3);
        for seed in 0..draws {
            let cfg = SamplerConfig {
                schedule: sched.clone(),
                seed,
                trace: TracePolicy::None,
                init: Init::Provided(DVector::zeros(3)),
            };
            let x = snips_sample(&svd, &y, &prior, &cfg).unwrap().sample;
            sum_sq += x.component_mul(&x);
        }
        for j in 0..3 {
            let got = (sum_sq[j] / draws as f64).sqrt();
            let want = (2.0 * c * alpha[j]).sqrt();
            assert!((got / want - 1.0).abs() < 0.02, "coordinate {j}: {got} vs {want}");
        }
    }

    #[test]
    fn one_dimensional_denoising_mean() {
        let svd = svd_decompose(&LinearOperator::identity(1).unwrap()).unwrap();
        let prior = GaussianPrior::isotropic(1, 0.5, 0.04).unwrap();
        let sigma0 = 0.1;
        let y = DVector::from_element(1, 0.8);
        let sched = make_geometric_schedule(1.0, 0.005, 400, sigma0, 0.1, 25).unwrap();
        let cfg = SamplerConfig::new(sched, 3);
        let batch = snips_sample_many(&svd, &y, &prior, &cfg, 2000).unwrap();
        let xs: Vec<f64> = batch.samples().iter().map(|s| s[0]).collect();
        let k = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / k;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
        // Posterior: precision 1/0.04 + 1/0.01, mean (0.5/0.04 + 0.8/0.01) / precision.
        let precision = 25.0 + 100.0;
        let want = (0.5 * 25.0 + 0.8 * 100.0) / precision;
        assert!((mean - want).abs() < 3.0 * sd / k.sqrt(), "{mean} vs {want}");
    }

    #[test]
    fn overflow_reports_divergence() {
        struct Huge;
        impl ScoreModel for Huge {
            fn dim(&self) -> usize {
                1
            }
            fn score(&self, _: &DVector<f64>, _: f64) -> Result<DVector<f64>> {
                Ok(DVector::from_element(1, 1e308))
            }
        }
        let svd = svd_decompose(&LinearOperator::zeros(1, 1).unwrap()).unwrap();
        let sched = NoiseSchedule::new(vec![1e3, 1.0], 0.0, 1.0, 2).unwrap();
        let cfg = SamplerConfig::new(sched, 0);
        let err = snips_sample(&svd, &DVector::zeros(1), &Huge, &cfg).unwrap_err();
        assert!(matches!(err, SnipsError::Divergence { level: 0, step: 0 }));
    }

    #[test]
    fn aggregate_population_std() {
        let a = DVector::from_vec(vec![0.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, 1.0]);
        let (m, s) = aggregate([&a, &b]);
        assert_eq!(m.unwrap().as_slice(), &[1.0, 1.0]);
        assert_eq!(s.unwrap().as_slice(), &[1.0, 0.0]);
        assert_eq!(aggregate(std::iter::empty()), (None, None));
    }
}
