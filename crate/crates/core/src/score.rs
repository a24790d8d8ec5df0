//! Conditional score in the `V` domain and the per-coordinate step sizes.

use nalgebra::DVector;

use crate::error::{check_dim, Result, SnipsError};
use crate::operators::DegradationSVD;
use crate::priors::ScoreModel;
use crate::schedule::{Regime, SpectrumPartition};

/// Relative floor used both for step sizes and for measurement denominators.
pub const BOUNDARY_FLOOR: f64 = 1e-12;

pub struct ConditionalScoreInputs<'a> {
    /// `U^T y`, length `M`.
    pub y_t: &'a DVector<f64>,
    /// Current iterate in signal space, length `N`.
    pub x: &'a DVector<f64>,
    pub sigma_i: f64,
    pub sigma0: f64,
    pub svd: &'a DegradationSVD,
    pub prior: &'a dyn ScoreModel,
}

/// Score vector plus the number of coordinates whose measurement weight was capped.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalScore {
    pub d: DVector<f64>,
    pub boundary_hits: usize,
}

/// Conditional score of the noisy iterate given the measurement, in the `V` domain.
pub fn conditional_score(
    inp: &ConditionalScoreInputs<'_>,
    partition: &SpectrumPartition,
) -> Result<ConditionalScore> {
    let svd = inp.svd;
    check_dim(svd.rows(), inp.y_t.len(), "projected measurement")?;
    check_dim(svd.cols(), inp.x.len(), "iterate")?;
    check_dim(svd.cols(), partition.len(), "partition")?;
    check_dim(svd.cols(), inp.prior.dim(), "prior")?;
    let x_t = svd.to_spectral(inp.x)?;
    let prior_t = if partition.needs_prior() {
        Some(spectral_prior_score(inp.prior, svd, inp.x, inp.sigma_i)?)
    } else {
        None
    };
    let mut d = DVector::zeros(svd.cols());
    let boundary_hits = assemble(
        partition,
        svd.extended_singulars().as_slice(),
        inp.y_t.as_slice(),
        x_t.as_slice(),
        prior_t.as_ref().map(|p| p.as_slice()),
        inp.sigma_i,
        inp.sigma0,
        d.as_mut_slice(),
    );
    Ok(ConditionalScore { d, boundary_hits })
}

/// `V^T s(x, σ)`, rejecting non-finite prior output.
pub(crate) fn spectral_prior_score(
    prior: &dyn ScoreModel,
    svd: &DegradationSVD,
    x: &DVector<f64>,
    sigma: f64,
) -> Result<DVector<f64>> {
    let s = prior.score(x, sigma)?;
    check_dim(svd.cols(), s.len(), "prior score")?;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(SnipsError::Numeric(format!(
            "prior score is not finite at sigma = {sigma}"
        )));
    }
    svd.to_spectral(&s)
}

/// Per-coordinate assembly. `prior_t` must be present when the partition has
/// any zero or less coordinate.
#[allow(clippy::too_many_arguments)]
pub(crate) fn assemble(
    partition: &SpectrumPartition,
    extended: &[f64],
    y_t: &[f64],
    x_t: &[f64],
    prior_t: Option<&[f64]>,
    sigma_i: f64,
    sigma0: f64,
    out: &mut [f64],
) -> usize {
    let floor = BOUNDARY_FLOOR * sigma0.powi(2).max(sigma_i.powi(2));
    let mut hits = 0;
    for (j, regime) in partition.regimes().iter().enumerate() {
        let s = extended[j];
        out[j] = match regime {
            Regime::Zero => prior_t.expect("prior score required")[j],
            Regime::Greater | Regime::Less => {
                let raw = match regime {
                    Regime::Greater => sigma_i * sigma_i * s * s - sigma0 * sigma0,
                    _ => sigma0 * sigma0 - sigma_i * sigma_i * s * s,
                };
                let denom = if raw < floor {
                    hits += 1;
                    floor
                } else {
                    raw
                };
                let measurement = s * (y_t[j] - s * x_t[j]) / denom;
                if *regime == Regime::Less {
                    measurement + prior_t.expect("prior score required")[j]
                } else {
                    measurement
                }
            }
        };
    }
    hits
}

/// Diagonal of the step-size matrix `A_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSizeVector {
    pub values: DVector<f64>,
    /// Coordinates whose raw value was non-positive and got clamped.
    pub floor_hits: usize,
}

pub fn step_sizes(
    sigma_i: f64,
    sigma0: f64,
    svd: &DegradationSVD,
    partition: &SpectrumPartition,
) -> StepSizeVector {
    let mut values = DVector::zeros(partition.len());
    let floor_hits = fill_step_sizes(
        partition,
        svd.extended_singulars().as_slice(),
        sigma_i,
        sigma0,
        values.as_mut_slice(),
    );
    StepSizeVector { values, floor_hits }
}

pub(crate) fn fill_step_sizes(
    partition: &SpectrumPartition,
    extended: &[f64],
    sigma_i: f64,
    sigma0: f64,
    out: &mut [f64],
) -> usize {
    let var = sigma_i * sigma_i;
    let floor = BOUNDARY_FLOOR * var;
    let mut hits = 0;
    for (j, regime) in partition.regimes().iter().enumerate() {
        let s = extended[j];
        let raw = match regime {
            Regime::Zero => var,
            Regime::Greater => var - sigma0 * sigma0 / (s * s),
            Regime::Less => var * (1.0 - s * s * var / (sigma0 * sigma0)),
        };
        out[j] = if raw > floor {
            raw
        } else {
            hits += 1;
            floor
        };
    }
    hits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{svd_decompose, LinearOperator};
    use crate::priors::GaussianPrior;
    use crate::schedule::partition_spectrum;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_svd(s: f64) -> DegradationSVD {
        DegradationSVD::from_parts(
            DMatrix::identity(1, 1),
            DVector::from_element(1, s),
            DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    fn score_of(
        svd: &DegradationSVD,
        prior: &dyn ScoreModel,
        y_t: &DVector<f64>,
        x: &DVector<f64>,
        sigma_i: f64,
        sigma0: f64,
    ) -> ConditionalScore {
        let p = partition_spectrum(sigma_i, sigma0, svd);
        conditional_score(
            &ConditionalScoreInputs {
                y_t,
                x,
                sigma_i,
                sigma0,
                svd,
                prior,
            },
            &p,
        )
        .unwrap()
    }

    #[test]
    fn zero_operator_is_pure_synthesis() {
        let op = LinearOperator::zeros(2, 3).unwrap();
        let svd = svd_decompose(&op).unwrap();
        let prior = GaussianPrior::new(
            DVector::from_vec(vec![0.1, 0.2, 0.3]),
            DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 2.0, 0.1, 0.0, 0.1, 0.5]),
        )
        .unwrap();
        let x = DVector::from_vec(vec![1.0, -1.0, 0.5]);
        let y_t = DVector::from_vec(vec![9.0, -9.0]);
        let got = score_of(&svd, &prior, &y_t, &x, 0.7, 0.1);
        let want = svd.v().tr_mul(&prior.score(&x, 0.7).unwrap());
        assert!((got.d - want).amax() < 1e-14);
    }

    #[test]
    fn scalar_greater_case() {
        let svd = scalar_svd(1.0);
        let prior = GaussianPrior::isotropic(1, 0.0, 1.0).unwrap();
        let got = score_of(
            &svd,
            &prior,
            &DVector::from_element(1, 0.5),
            &DVector::zeros(1),
            1.0,
            0.1,
        );
        assert!((got.d[0] - 0.5 / 0.99).abs() < 1e-15);
        assert!((got.d[0] - 0.50505).abs() < 1e-5);
    }

    /// `∇_x̃ log p(x̃ | y)` for `x ~ N(m, v)`, `x̃ = x + n`, `y = s x + z`, with
    /// the cross covariance of `(n, z)` implied by the carving construction.
    fn joint_gaussian_score(m: f64, v: f64, s: f64, sigma: f64, sigma0: f64, y: f64, xt: f64) -> f64 {
        let cov_nz = if sigma * s > sigma0 {
            sigma0 * sigma0 / s
        } else {
            s * sigma * sigma
        };
        let vx = v + sigma * sigma;
        let vy = s * s * v + sigma0 * sigma0;
        let cxy = s * v + cov_nz;
        let mean = m + cxy / vy * (y - s * m);
        let var = vx - cxy * cxy / vy;
        -(xt - mean) / var
    }

    #[test]
    fn one_dimensional_gaussian_matches_joint_model() {
        let svd = scalar_svd(1.0);
        let prior = GaussianPrior::isotropic(1, 0.0, 1.0).unwrap();
        let sigma0 = 0.1;
        for sigma_i in [2.0, 0.5, 0.11, 0.09, 0.05, 0.01] {
            for (y, xt) in [(0.3, 0.1), (-1.0, 0.7), (0.0, -2.0)] {
                let got = score_of(
                    &svd,
                    &prior,
                    &DVector::from_element(1, y),
                    &DVector::from_element(1, xt),
                    sigma_i,
                    sigma0,
                )
                .d[0];
                let want = joint_gaussian_score(0.0, 1.0, 1.0, sigma_i, sigma0, y, xt);
                assert!(
                    (got - want).abs() <= 1e-8 * want.abs().max(1.0),
                    "sigma_i={sigma_i}: {got} vs {want}"
                );
            }
        }
    }

    fn random_problem(rng: &mut ChaCha8Rng, m: usize, n: usize) -> (DegradationSVD, GaussianPrior) {
        let h = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let svd = svd_decompose(&LinearOperator::new(h).unwrap()).unwrap();
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let c = &a * a.transpose() + DMatrix::identity(n, n) * 0.5;
        let c = (&c + c.transpose()) * 0.5;
        (svd, GaussianPrior::new(DVector::zeros(n), c).unwrap())
    }

    /// Matrix form `Σ^T |σ0² I - σ_i² Σ Σ^T|^† (y_T - Σ V^T x) + mask ⊙ V^T s`.
    fn unified(
        svd: &DegradationSVD,
        prior: &GaussianPrior,
        y_t: &DVector<f64>,
        x: &DVector<f64>,
        sigma_i: f64,
        sigma0: f64,
    ) -> DVector<f64> {
        let (m, n) = (svd.rows(), svd.cols());
        let mut sig = DMatrix::zeros(m, n);
        for (j, s) in svd.singulars().iter().enumerate() {
            sig[(j, j)] = *s;
        }
        let inner = DMatrix::identity(m, m) * sigma0.powi(2) - &sig * sig.transpose() * sigma_i.powi(2);
        let abs_pinv = DMatrix::from_fn(m, m, |r, c| {
            if r == c && inner[(r, r)] != 0.0 {
                1.0 / inner[(r, r)].abs()
            } else {
                0.0
            }
        });
        let meas = sig.transpose() * abs_pinv * (y_t - &sig * svd.v().tr_mul(x));
        let prior_t = svd.v().tr_mul(&prior.score(x, sigma_i).unwrap());
        let ext = svd.extended_singulars();
        let mask = DVector::from_fn(n, |j, _| if sigma_i * ext[j] > sigma0 { 0.0 } else { 1.0 });
        meas + prior_t.component_mul(&mask)
    }

    #[test]
    fn branchwise_matches_unified_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (m, n) in [(3, 5), (5, 5), (6, 4), (1, 3)] {
            let (svd, prior) = random_problem(&mut rng, m, n);
            let y_t = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
            let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let sigma0 = 0.1;
            for sigma_i in [10.0, 0.3, 0.1, 0.05, 0.001] {
                let got = score_of(&svd, &prior, &y_t, &x, sigma_i, sigma0);
                let want = unified(&svd, &prior, &y_t, &x, sigma_i, sigma0);
                assert!((&got.d - &want).amax() <= 1e-12 * want.amax().max(1.0));
            }
        }
    }

    #[test]
    fn measurement_and_prior_supports() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (svd, prior) = random_problem(&mut rng, 3, 6);
        let x = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let y_t = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let y_t2 = y_t.map(|v| v + 0.7);
        let other_prior = GaussianPrior::isotropic(6, 0.4, 3.0).unwrap();
        let (sigma_i, sigma0) = (0.2, 0.1);
        let p = partition_spectrum(sigma_i, sigma0, &svd);
        let a = score_of(&svd, &prior, &y_t, &x, sigma_i, sigma0).d;
        let b = score_of(&svd, &prior, &y_t2, &x, sigma_i, sigma0).d;
        let c = score_of(&svd, &other_prior, &y_t, &x, sigma_i, sigma0).d;
        for &j in p.zero() {
            assert_eq!(a[j], b[j]);
        }
        for &j in p.greater() {
            assert_eq!(a[j], c[j]);
        }
        assert!(!p.zero().is_empty());
    }

    #[test]
    fn boundary_weight_is_capped() {
        let svd = scalar_svd(1.0);
        let prior = GaussianPrior::isotropic(1, 0.0, 1.0).unwrap();
        let got = score_of(
            &svd,
            &prior,
            &DVector::from_element(1, 1.0),
            &DVector::zeros(1),
            0.5,
            0.5,
        );
        assert_eq!(got.boundary_hits, 1);
        assert!(got.d[0].is_finite());
        assert!((got.d[0] - 1.0 / (1e-12 * 0.25)).abs() / got.d[0] < 1e-12);
    }

    #[test]
    fn nan_prior_is_a_numeric_error() {
        struct Broken;
        impl ScoreModel for Broken {
            fn dim(&self) -> usize {
                1
            }
            fn score(&self, _: &DVector<f64>, _: f64) -> Result<DVector<f64>> {
                Ok(DVector::from_element(1, f64::NAN))
            }
        }
        let svd = scalar_svd(0.0);
        let p = partition_spectrum(1.0, 0.1, &svd);
        let err = conditional_score(
            &ConditionalScoreInputs {
                y_t: &DVector::zeros(1),
                x: &DVector::zeros(1),
                sigma_i: 1.0,
                sigma0: 0.1,
                svd: &svd,
                prior: &Broken,
            },
            &p,
        )
        .unwrap_err();
        assert!(matches!(err, SnipsError::Numeric(_)));
    }

    #[test]
    fn step_size_examples() {
        let svd = scalar_svd(0.0);
        let p = partition_spectrum(0.5, 0.1, &svd);
        assert_eq!(step_sizes(0.5, 0.1, &svd, &p).values[0], 0.25);

        let svd = scalar_svd(1.0);
        let p = partition_spectrum(0.5, 0.1, &svd);
        assert!((step_sizes(0.5, 0.1, &svd, &p).values[0] - 0.24).abs() < 1e-15);

        let p = partition_spectrum(0.05, 0.1, &svd);
        let a = step_sizes(0.05, 0.1, &svd, &p);
        assert!((a.values[0] - 0.0025 * 0.75).abs() < 1e-15);
        assert_eq!(a.floor_hits, 0);

        let p = partition_spectrum(0.1, 0.1, &svd);
        let a = step_sizes(0.1, 0.1, &svd, &p);
        assert_eq!(a.floor_hits, 1);
        assert_eq!(a.values[0], 1e-12 * (0.1 * 0.1));
    }

    #[test]
    fn step_sizes_continuous_at_boundary() {
        let svd = scalar_svd(2.0);
        let sigma0 = 0.3;
        let edge = sigma0 / 2.0;
        for eps in [1e-7, 1e-9, 1e-11] {
            let above = edge * (1.0 + eps);
            let below = edge * (1.0 - eps);
            let a = step_sizes(above, sigma0, &svd, &partition_spectrum(above, sigma0, &svd)).values[0];
            let b = step_sizes(below, sigma0, &svd, &partition_spectrum(below, sigma0, &svd)).values[0];
            assert!(a > 0.0 && a < 1e-8 && b > 0.0 && b < 1e-8);
            assert!((a - b).abs() < 1e-8);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn step_sizes_positive_off_boundary(
                s in prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..5.0], 1..10),
                sigma_i in 1e-3f64..50.0,
                sigma0 in 0.0f64..1.0,
            ) {
                let mut sorted = s.clone();
                sorted.sort_by(|a, b| b.total_cmp(a));
                let n = sorted.len();
                let svd = DegradationSVD::from_parts(
                    DMatrix::identity(n, n),
                    DVector::from_vec(sorted.clone()),
                    DMatrix::identity(n, n),
                ).unwrap();
                prop_assume!(sorted.iter().all(|v| (sigma_i * v - sigma0).abs() > 1e-6 * sigma0.max(1e-300)));
                let p = partition_spectrum(sigma_i, sigma0, &svd);
                let a = step_sizes(sigma_i, sigma0, &svd, &p);
                prop_assert!(a.values.iter().all(|v| *v > 0.0));
            }
        }
    }
}
