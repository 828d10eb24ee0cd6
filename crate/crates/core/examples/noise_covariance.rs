//! Checks the correlated Gaussian increments of both underdamped integrators
//! against their closed-form covariances.

use midpoint_sampler::rng::{shenlee_noise_covariance, uld_noise_covariance, ShenLeeNoiseLaw, UldNoiseLaw};
use midpoint_sampler::RngStream;

const DRAWS: usize = 200_000;

fn main() -> midpoint_sampler::Result<()> {
    let mut rng = RngStream::new(11);

    let (delta, gamma) = (0.5, 2.0);
    let law = UldNoiseLaw::new(delta, gamma)?;
    let (mut zx, mut zv) = ([0.0], [0.0]);
    let mut acc = [0.0; 3];
    for _ in 0..DRAWS {
        law.sample_into(&mut rng, &mut zx, &mut zv);
        acc[0] += zx[0] * zx[0];
        acc[1] += zx[0] * zv[0];
        acc[2] += zv[0] * zv[0];
    }
    let (vx, cxv, vv) = uld_noise_covariance(delta, gamma);
    println!("exponential-integrator step (delta {delta}, gamma {gamma})");
    for (name, exact, k) in [("var x", vx, 0), ("cov xv", cxv, 1), ("var v", vv, 2)] {
        println!("  {name:<7} exact {exact:.5}  empirical {:.5}", acc[k] / DRAWS as f64);
    }

    let (alpha, h, u) = (0.4, 0.5, 0.5);
    let law = ShenLeeNoiseLaw::new(alpha, h, u)?;
    let exact = shenlee_noise_covariance(alpha, h, u);
    let (mut a, mut b, mut c) = ([0.0], [0.0], [0.0]);
    let mut m = [[0.0; 3]; 3];
    for _ in 0..DRAWS {
        law.sample_into(&mut rng, &mut a, &mut b, &mut c);
        let w = [a[0], b[0], c[0]];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += w[i] * w[j] / DRAWS as f64;
            }
        }
    }
    println!("randomized-midpoint step (alpha {alpha}, h {h}, u {u})");
    for i in 0..3 {
        println!("  exact {:>9.5?}  empirical {:>9.5?}", exact[i], m[i]);
    }
    Ok(())
}
