//! Parallel sampler on the same mixture at two dimensions. The number of
//! sequential rounds changes little with `d` while the total work grows.

use midpoint_sampler::metrics::tv_estimate;
use midpoint_sampler::parallel::sample_parallel;
use midpoint_sampler::schedule::make_parallel_schedule;
use midpoint_sampler::{RngStream, TargetModel, WorkerPool};

fn mixture(d: usize) -> midpoint_sampler::Result<TargetModel> {
    let eye: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let mut a = vec![0.0; d];
    a[0] = 2.0;
    let b: Vec<f64> = a.iter().map(|v| -v).collect();
    TargetModel::gaussian_mixture(vec![0.5, 0.5], vec![a, b], vec![eye.clone(), eye])?.with_curvature(0.25, 3.0)
}

fn main() -> midpoint_sampler::Result<()> {
    let pool = WorkerPool::resolve(None)?;
    println!("{} worker threads", pool.workers());
    for d in [2, 8] {
        let target = mixture(d)?;
        let schedule = make_parallel_schedule(target.smoothness(), d, 0.3, target.m2(), 2.0)?;
        let (x, work) = pool.install(|| sample_parallel(5_000, &schedule, &target, &RngStream::new(4)))?;
        let tv = tv_estimate(&x, &target, &RngStream::new(5))?;
        println!(
            "d = {d}: {} rounds ({} predictor, {} corrector), {} evaluations per particle, TV {:.3}",
            work.parallel_rounds, work.predictor_rounds, work.corrector_rounds, work.score_evaluations, tv.value
        );
    }
    Ok(())
}
