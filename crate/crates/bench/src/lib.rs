//! Shared fixtures for the criterion benches.

use nalgebra::DVector;
use snips_core::{
    make_geometric_schedule, make_uniform_blur, svd_decompose, Boundary, DegradationSVD, GaussianPrior,
    LinearOperator, NoiseSchedule,
};

pub struct Fixture {
    pub op: LinearOperator,
    pub svd: DegradationSVD,
    pub prior: GaussianPrior,
    pub y: DVector<f64>,
    pub schedule: NoiseSchedule,
}

/// Deblurring a `side x side` image with a 3x3 box kernel under a stationary prior.
pub fn deblur(side: usize, levels: usize) -> Fixture {
    let sigma0 = 0.1;
    let op = make_uniform_blur(side, 3, Boundary::Circular).expect("valid blur");
    let svd = svd_decompose(&op).expect("svd");
    let prior = GaussianPrior::stationary(side, 0.5, 0.04, 2.0).expect("prior");
    let x = DVector::from_fn(side * side, |i, _| 0.3 + 0.4 * ((i % side) as f64 / side as f64));
    let y = op.apply(&x).expect("apply");
    let schedule = make_geometric_schedule(1.0, 0.01, levels, sigma0, 0.1, 3).expect("schedule");
    Fixture {
        op,
        svd,
        prior,
        y,
        schedule,
    }
}
