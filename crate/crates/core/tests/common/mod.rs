#![allow(dead_code)]

use midpoint_sampler::{Batch, TargetModel};

/// Two unit-covariance components at `±2 e_1` in `d` dimensions, with the
/// exact smoothness constant 3 of the noised marginals.
pub fn two_bump_mixture(d: usize) -> TargetModel {
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    a[0] = 2.0;
    b[0] = -2.0;
    let eye: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let m = TargetModel::gaussian_mixture(vec![0.5, 0.5], vec![a, b], vec![eye.clone(), eye]).unwrap();
    let lower = m.strong_convexity().min(3.0);
    m.with_curvature(lower, 3.0).unwrap()
}

/// `(max |mean|, ||cov - I||_F)` of a batch.
pub fn moment_errors(x: &Batch) -> (f64, f64) {
    let d = x.dim();
    let mean_err = x.mean().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cov = x.covariance();
    let mut fro = 0.0;
    for i in 0..d {
        for j in 0..d {
            let e = if i == j { 1.0 } else { 0.0 };
            fro += (cov[i * d + j] - e).powi(2);
        }
    }
    (mean_err, fro.sqrt())
}
