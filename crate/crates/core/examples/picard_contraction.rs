//! Error of each Picard round on one collocation window, compared with the
//! exact flow and with the fixed point of the iteration.

use midpoint_sampler::harness::{cmd_picard_study, RunConfig};

fn main() -> midpoint_sampler::Result<()> {
    let cfg = RunConfig { out: Some(std::env::temp_dir().join("midpoint-sampler-picard")), seed: 4, ..RunConfig::default() };
    let rep = cmd_picard_study(&cfg)?;
    println!("contraction factor bound 8h²L² = {:.3}", rep.contraction_bound);
    for r in rep.rows.iter().take(rep.k_star + 2) {
        println!("round {:>2}  error {:.3e}  distance to fixed point {:.3e}  ratio {:.3}", r.round, r.mse_exact, r.mse_fixed_point, r.ratio);
    }
    println!(
        "fitted factor {:.2e}; discretization floor {:.3e} reached by round {}: {}",
        rep.fitted_factor, rep.floor, rep.k_star, rep.floor_reached_at_k_star
    );
    Ok(())
}
