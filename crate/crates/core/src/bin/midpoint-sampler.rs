use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use midpoint_sampler::harness::{
    cmd_convergence_study, cmd_picard_study, cmd_sample, cmd_verify, exit_code, Algorithm, RunConfig, EXIT_PROPERTY,
};
use midpoint_sampler::Result;

#[derive(Parser)]
#[command(name = "midpoint-sampler", version, about = "Randomized-midpoint diffusion samplers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw samples and report metrics against the target.
    Sample(Common),
    /// Sweep predictor step sizes and fit convergence orders.
    StudyConvergence(Common),
    /// Per-round Picard errors for one predictor window.
    StudyPicard(Common),
    /// Run the property suite; nonzero exit on failure.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (falls back to MIDPOINT_SAMPLER_THREADS).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_algorithm)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    c_t: Option<f64>,
    #[arg(long)]
    c_delta: Option<f64>,
    #[arg(long)]
    c_hpred: Option<f64>,
    #[arg(long)]
    c_hcorr: Option<f64>,
    #[arg(long)]
    c_tcorr: Option<f64>,
    #[arg(long)]
    c_r: Option<f64>,
    #[arg(long)]
    c_k: Option<f64>,
    #[arg(long)]
    c_hrand: Option<f64>,
    #[arg(long)]
    c_nrand: Option<f64>,
}

fn parse_algorithm(s: &str) -> std::result::Result<Algorithm, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown algorithm {s:?}; expected seq, parallel, logconcave or baseline-exp"))
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_path(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag { $field = v; })*
            };
        }
        set!(
            seed => c.seed, n => c.n, eps => c.eps, beta => c.beta, algorithm => c.algorithm,
            c_t => c.constants.c_t, c_delta => c.constants.c_delta, c_hpred => c.constants.c_hpred,
            c_hcorr => c.constants.c_hcorr, c_tcorr => c.constants.c_tcorr, c_r => c.constants.c_r,
            c_k => c.constants.c_k, c_hrand => c.constants.c_hrand, c_nrand => c.constants.c_nrand,
        );
        if self.workers.is_some() {
            c.workers = self.workers;
        }
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Sample(a) => {
            let r = cmd_sample(&a.config()?)?;
            let tv = r.metrics.tv.as_ref().map(|t| t.value).unwrap_or(f64::NAN);
            println!("{} samples, {} rounds, TV lower bound {tv:.4}", r.config.n, r.work.parallel_rounds);
            Ok(0)
        }
        Command::StudyConvergence(a) => {
            let r = cmd_convergence_study(&a.config()?)?;
            for row in &r.rows {
                println!("{:<12} h={:<8} W2={:.3e} TV={:.4}", row.algorithm, row.h, row.w2, row.tv);
            }
            println!("order midpoint {:.3}, exponential {:.3}", r.midpoint_order.slope, r.exponential_order.slope);
            Ok(0)
        }
        Command::StudyPicard(a) => {
            let r = cmd_picard_study(&a.config()?)?;
            for row in &r.rows {
                println!("round {:>3}: mse {:.3e}, to fixed point {:.3e}", row.round, row.mse_exact, row.mse_fixed_point);
            }
            println!("floor {:.3e}, fitted factor {:.3}, bound {:.3}", r.floor, r.fitted_factor, r.contraction_bound);
            Ok(0)
        }
        Command::Verify(a) => {
            let r = cmd_verify(&a.config()?)?;
            for c in &r.checks {
                let tag = if c.pass { "pass" } else if c.gating { "FAIL" } else { "info" };
                println!("{tag} {} ({})", c.name, c.detail);
            }
            Ok(if r.all_pass() { 0 } else { EXIT_PROPERTY })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
