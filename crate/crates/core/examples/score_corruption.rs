//! How an inexact score shows up in the output. A smooth synthetic
//! perturbation with a prescribed L2 error is added to the exact score.

use midpoint_sampler::metrics::tv_estimate;
use midpoint_sampler::schedule::make_sequential_schedule;
use midpoint_sampler::sequential::{sample_sequential, PredictorKind};
use midpoint_sampler::target::CorruptedScore;
use midpoint_sampler::{RngStream, TargetModel};

fn main() -> midpoint_sampler::Result<()> {
    let target = TargetModel::anisotropic_gaussian(vec![1.0, -1.0], vec![vec![2.0, 0.5], vec![0.5, 1.0]])?;
    let schedule = make_sequential_schedule(target.smoothness(), 2, 0.3, target.m2())?;
    let rng = RngStream::new(8);

    for eps_sc in [0.0, 0.1, 0.3, 1.0] {
        let tv = if eps_sc == 0.0 {
            let (x, _) = sample_sequential(20_000, &schedule, &target, PredictorKind::RandomizedMidpoint, &rng)?;
            tv_estimate(&x, &target, &rng.fork(9))?
        } else {
            let score = CorruptedScore::new(&target, eps_sc, &rng.fork(3))?;
            let (x, _) = sample_sequential(20_000, &schedule, &score, PredictorKind::RandomizedMidpoint, &rng)?;
            tv_estimate(&x, &target, &rng.fork(9))?
        };
        println!("score error {eps_sc:<4} -> TV {:.4} ± {:.4}", tv.value, tv.stderr);
    }
    Ok(())
}
