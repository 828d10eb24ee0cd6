//! Step-size sweep of the predictor alone against a fine RK4 solution of the
//! probability-flow ODE. Prints the error table and the fitted orders.

use midpoint_sampler::harness::{cmd_convergence_study, RunConfig};

fn main() -> midpoint_sampler::Result<()> {
    let dir = std::env::temp_dir().join("midpoint-sampler-convergence");
    let mut cfg = RunConfig { out: Some(dir.clone()), seed: 7, ..RunConfig::default() };
    cfg.convergence.n = 50_000;
    let rep = cmd_convergence_study(&cfg)?;

    println!("{:<22} {:>8} {:>12}", "predictor", "h", "coupled W2");
    for row in &rep.rows {
        println!("{:<22} {:>8} {:>12.3e}", row.algorithm, row.h, row.w2);
    }
    let m = &rep.midpoint_order;
    let e = &rep.exponential_order;
    println!("randomized midpoint order {:.2} [{:.2}, {:.2}]", m.slope, m.ci_low, m.ci_high);
    println!("exponential integrator order {:.2} [{:.2}, {:.2}]", e.slope, e.ci_low, e.ci_high);
    println!("table written to {}", dir.display());
    Ok(())
}
