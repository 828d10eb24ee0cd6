//! Log-concave sampler on an ill-conditioned Gaussian (condition number 4).

use midpoint_sampler::logconcave::run_logconcave;
use midpoint_sampler::metrics::{gaussian_w2, tv_estimate};
use midpoint_sampler::schedule::make_logconcave_schedule;
use midpoint_sampler::{RngStream, TargetModel};

fn main() -> midpoint_sampler::Result<()> {
    let target = TargetModel::quadratic_log_concave(vec![0.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 0.25]])?;
    let (mean, cov) = target.moments(0.0);

    for eps in [0.3, 0.15] {
        let s = make_logconcave_schedule(target.strong_convexity(), target.smoothness(), 2, eps)?;
        let out = run_logconcave(&target, &s, 20_000, &RngStream::new(2))?;
        let raw = gaussian_w2(&out.before_corrector.mean(), &out.before_corrector.covariance(), &mean, &cov)?;
        let fin = gaussian_w2(&out.samples.mean(), &out.samples.covariance(), &mean, &cov)?;
        let tv = tv_estimate(&out.samples, &target, &RngStream::new(3))?;
        println!(
            "eps {eps}: {} steps of h = {:.3}; moment W2 {raw:.4} -> {fin:.4} after the corrector; TV {:.4}",
            s.n_rand.unwrap_or(0),
            s.h_rand.unwrap_or(0.0),
            tv.value
        );
    }
    Ok(())
}
