//! Monte-Carlo properties of the noise construction and the sampler.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use snips_core::oracle::independent_noise_sequence;
use snips_core::{
    carve_noise_sequence, dagostino_k2, exact_gaussian_posterior, make_geometric_schedule, snips_sample_many,
    svd_decompose, DegradationSVD, GaussianPrior, GmmPrior, LinearOperator, NoiseSchedule, SamplerConfig,
};

fn scalar_svd(s: f64) -> DegradationSVD {
    DegradationSVD::from_parts(DMatrix::identity(1, 1), DVector::from_element(1, s), DMatrix::identity(1, 1)).unwrap()
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn carved_residual_is_gaussian_in_most_batches() {
    let svd = scalar_svd(1.0);
    let sigma0 = 0.1;
    let schedule = NoiseSchedule::new(vec![1.0, 0.05], sigma0, 0.1, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut accepted = [0usize; 2];
    for _ in 0..100 {
        let mut batch = [Vec::with_capacity(10_000), Vec::with_capacity(10_000)];
        for _ in 0..10_000 {
            let z = DVector::from_element(1, sigma0 * rng.sample::<f64, _>(StandardNormal));
            let carved = carve_noise_sequence(&z, &schedule, &svd, rng.random()).unwrap();
            for (level, out) in batch.iter_mut().enumerate() {
                out.push(carved.overall_noise(level, &svd)[0]);
            }
        }
        for (level, b) in batch.iter().enumerate() {
            if dagostino_k2(b).unwrap().pvalue > 0.05 {
                accepted[level] += 1;
            }
        }
    }
    assert!(accepted.iter().all(|a| *a >= 90), "{accepted:?}");
}

#[test]
fn carved_residual_decouples_from_the_noisy_signal() {
    // Below the crossing, y - s x̃ = z - s n must not correlate with x̃ = x + n.
    let (s, sigma0, sigma_i) = (1.0, 0.1, 0.05);
    let svd = scalar_svd(s);
    let schedule = NoiseSchedule::new(vec![1.0, sigma_i], sigma0, 0.1, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 100_000;
    let (mut xt_c, mut r_c, mut xt_i, mut r_i) = (vec![], vec![], vec![], vec![]);
    for _ in 0..draws {
        let x = 0.1 * rng.sample::<f64, _>(StandardNormal);
        let z = sigma0 * rng.sample::<f64, _>(StandardNormal);
        let carved = carve_noise_sequence(&DVector::from_element(1, z), &schedule, &svd, rng.random()).unwrap();
        let n = carved.levels[1][0];
        xt_c.push(x + n);
        r_c.push(z - s * n);
        let n = independent_noise_sequence(&schedule, 1, rng.random())[1][0];
        xt_i.push(x + n);
        r_i.push(z - s * n);
    }
    let carved = corr(&r_c, &xt_c);
    let independent = corr(&r_i, &xt_i);
    assert!(carved.abs() < 0.02, "carved correlation {carved}");
    // -s σ_i² / sqrt((σ0² + s² σ_i²)(0.01 + σ_i²)) = -0.2
    assert!((independent + 0.2).abs() < 0.02, "independent correlation {independent}");
}

#[test]
fn synthesis_occupancy_matches_weights() {
    let weights = vec![0.6, 0.4];
    let comps = [[0.2, 0.2], [0.8, 0.7]]
        .iter()
        .map(|c| GaussianPrior::new(DVector::from_row_slice(c), DMatrix::identity(2, 2) * 0.005).unwrap())
        .collect();
    let gmm = GmmPrior::new(weights.clone(), comps).unwrap();
    let svd = svd_decompose(&LinearOperator::zeros(2, 2).unwrap()).unwrap();
    let cfg = SamplerConfig::new(make_geometric_schedule(2.0, 0.01, 100, 0.0, 0.1, 10).unwrap(), 3);
    let chains = 1_000;
    let batch = snips_sample_many(&svd, &DVector::zeros(2), &gmm, &cfg, chains).unwrap();
    let mut counts = [0usize; 2];
    for s in batch.samples() {
        let nearest = (0..2)
            .min_by(|a, b| {
                let da = (s - gmm.components()[*a].mean()).norm();
                let db = (s - gmm.components()[*b].mean()).norm();
                da.total_cmp(&db)
            })
            .unwrap();
        counts[nearest] += 1;
    }
    for (c, w) in counts.iter().zip(&weights) {
        let se = (w * (1.0 - w) / chains as f64).sqrt();
        let frac = *c as f64 / chains as f64;
        assert!((frac - w).abs() <= 3.0 * se, "{counts:?}");
    }
}

#[test]
fn posterior_spread_and_mean_improvement() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
    let op = LinearOperator::new(h).unwrap();
    let prior = GaussianPrior::new(
        DVector::from_element(4, 0.5),
        DMatrix::from_fn(4, 4, |r, c| 0.04 * 0.5f64.powi((r as i32 - c as i32).abs())),
    )
    .unwrap();
    let sigma0 = 0.1;
    let truth = DVector::from_vec(vec![0.3, 0.6, 0.55, 0.4]);
    let y = op.apply(&truth).unwrap() + DVector::from_fn(3, |_, _| sigma0 * rng.sample::<f64, _>(StandardNormal));
    let exact = exact_gaussian_posterior(&prior, &op, sigma0, &y).unwrap();
    let svd = svd_decompose(&op).unwrap();
    let cfg = SamplerConfig::new(make_geometric_schedule(1.0, 0.005, 300, sigma0, 0.1, 10).unwrap(), 8);
    let batch = snips_sample_many(&svd, &y, &prior, &cfg, 500).unwrap();
    let std = batch.std.as_ref().unwrap();
    for (got, want) in std.iter().zip(exact.std().iter()) {
        assert!((got / want - 1.0).abs() <= 0.1, "{got} vs {want}");
    }
    let mean = batch.mean.as_ref().unwrap();
    let mean_mse = (mean - &truth).norm_squared();
    let sample_mse: f64 = batch.samples().iter().map(|s| (*s - &truth).norm_squared()).sum::<f64>() / 500.0;
    assert!(mean_mse <= sample_mse);
}
