//! End-to-end acceptance checks. Each test prints one `[PASS]` or `[FAIL]`
//! line with the measured quantities and then asserts.
//!
//! The tests share one lock so their wall-clock budgets are measured without
//! interference from each other.

mod common;

use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use common::{moment_errors, two_bump_mixture};
use midpoint_sampler::corrector::run_corrector;
use midpoint_sampler::harness::{cmd_convergence_study, cmd_picard_study, RunConfig};
use midpoint_sampler::logconcave::{run_logconcave, run_shenlee, ShenLeeState};
use midpoint_sampler::metrics::{check_helper_lemmas, tv_estimate, MIXING_SLOPE_RANGE};
use midpoint_sampler::parallel::{run_parallel_corrector, run_parallel_predictor, sample_parallel, WorkReport};
use midpoint_sampler::predictor::{run_predictor, PredictorState};
use midpoint_sampler::rng::{ShenLeeNoiseLaw, UldNoiseLaw};
use midpoint_sampler::schedule::{
    make_logconcave_schedule, make_parallel_schedule, make_sequential_schedule, make_sequential_schedule_with,
    ScheduleConstants,
};
use midpoint_sampler::sequential::{sample_sequential, PredictorKind};
use midpoint_sampler::{Batch, RngStream, TargetModel, WorkerPool};

static SERIAL: Mutex<()> = Mutex::new(());

/// Written straight to stdout so the line shows without `--nocapture`.
fn verdict(name: &str, pass: bool, detail: String) {
    let line = format!("[{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().write_all(line.as_bytes());
    assert!(pass, "{name}: {detail}");
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Accuracy the component schedules are built for. The corrector step at this
/// accuracy is 0.1 for d = 1, so its O(h^2) bias sits well inside the tolerance.
const STATIONARITY_EPS: f64 = 0.1;

#[test]
fn stationarity_suite() {
    let _g = lock();
    let n = 100_000;
    let mut failures = Vec::new();
    let mut lines = Vec::new();
    for d in [1usize, 4, 16] {
        let model = TargetModel::standard_normal(d).unwrap();
        let seq = make_sequential_schedule(1.0, d, STATIONARITY_EPS, model.m2()).unwrap();
        let par = make_parallel_schedule(1.0, d, STATIONARITY_EPS, model.m2(), 2.0).unwrap();
        let lc = make_logconcave_schedule(1.0, 1.0, d, STATIONARITY_EPS).unwrap();
        let rng = RngStream::new(100 + d as u64);
        let x0 = model.sample_exact(0.0, n, &rng.fork(0)).unwrap();
        let block = &seq.blocks[0];
        let pblock = &par.blocks[0];
        let pc = par.parallel.unwrap();

        let cases: Vec<(&str, Box<dyn Fn() -> Batch>)> = vec![
            (
                "sequential predictor",
                Box::new(|| {
                    run_predictor(PredictorState::new(x0.clone(), block.t_start), &block.steps, &model, &rng.fork(1))
                        .unwrap()
                        .x
                }),
            ),
            (
                "sequential corrector",
                Box::new(|| {
                    run_corrector(x0.clone(), block.t_end, seq.t_corr, seq.h_corr, seq.gamma, &model, &rng.fork(2)).unwrap()
                }),
            ),
            (
                "parallel predictor",
                Box::new(|| run_parallel_predictor(x0.clone(), &pblock.windows, &model, &rng.fork(3)).unwrap().0),
            ),
            (
                "parallel corrector",
                Box::new(|| {
                    run_parallel_corrector(x0.clone(), pblock.t_end, par.t_corr, pc.h, pc.r, pc.k, par.gamma, &model, &rng.fork(4))
                        .unwrap()
                        .0
                }),
            ),
            (
                "randomized-midpoint ULD",
                Box::new(|| {
                    let u = 1.0 / lc.l;
                    let v0 = TargetModel::isotropic_gaussian(vec![0.0; d], u).unwrap().sample_exact(0.0, n, &rng.fork(5)).unwrap();
                    let st = ShenLeeState::new(x0.clone(), v0, lc.l).unwrap();
                    run_shenlee(st, lc.n_rand.unwrap(), lc.h_rand.unwrap(), &model, &rng.fork(6)).unwrap().x
                }),
            ),
        ];
        for (name, run) in cases {
            let start = Instant::now();
            let out = run();
            let secs = start.elapsed().as_secs_f64();
            let (mu, fro) = moment_errors(&out);
            let ok = mu <= 4.0 / (n as f64).sqrt() && fro <= 0.05 * d as f64 && secs <= 120.0;
            let line = format!("d={d} {name}: |mean|_inf={mu:.2e} |cov-I|_F={fro:.2e} {secs:.1}s");
            if !ok {
                failures.push(line.clone());
            }
            lines.push(line);
        }
    }
    for l in &lines {
        println!("    {l}");
    }
    verdict("stationarity suite", failures.is_empty(), format!("{} cases, failing: {:?}", lines.len(), failures));
}

#[test]
fn midpoint_unbiasedness() {
    let _g = lock();
    let mut rng = RngStream::new(2);
    let mut details = Vec::new();
    let mut ok = true;
    for h in [0.05f64, 0.2] {
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let v = h * ((1.0 - rng.uniform()) * h).exp();
            s1 += v;
            s2 += v * v;
        }
        let mean = s1 / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let z = (mean - h.exp_m1()) / se;
        ok &= z.abs() <= 4.0;
        details.push(format!("h={h}: z={z:.2}"));
    }
    verdict("randomized midpoint unbiasedness", ok, details.join(", "));
}

#[test]
fn convergence_order_separation() {
    let _g = lock();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig { out: Some(dir.path().into()), seed: 3, ..RunConfig::default() };
    cfg.convergence.n = 1_000_000;
    let rep = cmd_convergence_study(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (mid, exp) = (rep.midpoint_order.slope, rep.exponential_order.slope);
    for r in &rep.rows {
        println!("    {:<12} h={:<7} err={:.3e} (sorted W2 {:.3e})", r.algorithm, r.h, r.w2, r.w2_sorted);
    }
    verdict(
        "convergence-order separation",
        mid >= 1.3 && mid - exp >= 0.3 && secs <= 600.0,
        format!("midpoint slope {mid:.3}, exponential slope {exp:.3}, {secs:.1}s"),
    );
}

#[test]
fn picard_contraction() {
    let _g = lock();
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { out: Some(dir.path().into()), seed: 4, ..RunConfig::default() };
    let rep = cmd_picard_study(&cfg).unwrap();
    for r in rep.rows.iter().take(rep.k_star + 1) {
        println!("    round {:>2}: mse {:.3e} ratio {:.3e} allowed {:.3e}", r.round, r.mse_exact, r.ratio, r.ratio_bound);
    }
    verdict(
        "Picard contraction",
        rep.ratios_within_bound && rep.fitted_factor <= 0.6 && rep.floor_reached_at_k_star,
        format!(
            "8h^2L^2={:.3}, fitted factor {:.3e}, floor {:.3e}, K*={} reaches floor: {}",
            rep.contraction_bound, rep.fitted_factor, rep.floor, rep.k_star, rep.floor_reached_at_k_star
        ),
    );
}

const EM_SUBSTEPS: usize = 2000;
const EM_PATHS: usize = 1_000_000;

/// Second moments (zero-mean) of `k`-vectors produced by `draw`.
fn second_moments(k: usize, n: usize, mut draw: impl FnMut(&mut [f64])) -> Vec<f64> {
    let mut acc = vec![0.0; k * k];
    let mut w = vec![0.0; k];
    for _ in 0..n {
        draw(&mut w);
        for i in 0..k {
            for j in 0..k {
                acc[i * k + j] += w[i] * w[j];
            }
        }
    }
    acc.iter().map(|v| v / n as f64).collect()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs()).fold(0.0, f64::max)
}

#[test]
fn noise_covariance_matches_euler_maruyama() {
    let _g = lock();
    let mut ok = true;
    let mut details = Vec::new();
    for (i, (delta, gamma)) in [(0.1f64, 1.0f64), (0.5, 2.0), (1.0, 0.5)].into_iter().enumerate() {
        let law = UldNoiseLaw::new(delta, gamma).unwrap();
        let mut r = RngStream::new(50 + i as u64);
        let (mut zx, mut zv) = ([0.0], [0.0]);
        let exact = second_moments(2, EM_PATHS, |w| {
            law.sample_into(&mut r, &mut zx, &mut zv);
            w[0] = zx[0];
            w[1] = zv[0];
        });
        // dx = v dt, dv = -γ v dt + sqrt(2γ) dB from rest
        let dt = delta / EM_SUBSTEPS as f64;
        let kick = (2.0 * gamma * dt).sqrt();
        let mut r = RngStream::new(60 + i as u64);
        let em = second_moments(2, EM_PATHS, |w| {
            let (mut x, mut v) = (0.0, 0.0);
            for _ in 0..EM_SUBSTEPS {
                x += v * dt;
                v += -gamma * v * dt + kick * r.normal();
            }
            w[0] = x;
            w[1] = v;
        });
        let e = max_rel(&exact, &em);
        ok &= e <= 0.02;
        details.push(format!("ULD(δ={delta}, γ={gamma}) {:.2}%", 100.0 * e));
    }
    for (i, (alpha, h, u)) in [(0.3f64, 0.1f64, 1.0f64), (0.5, 0.5, 0.25), (0.8, 1.0, 2.0)].into_iter().enumerate() {
        let law = ShenLeeNoiseLaw::new(alpha, h, u).unwrap();
        let mut r = RngStream::new(70 + i as u64);
        let (mut a, mut b, mut c) = ([0.0], [0.0], [0.0]);
        let exact = second_moments(3, EM_PATHS, |w| {
            law.sample_into(&mut r, &mut a, &mut b, &mut c);
            w.copy_from_slice(&[a[0], b[0], c[0]]);
        });
        // dx = v dt, dv = -2 v dt + 2 sqrt(u) dB from rest; W1 = x(αh), W2 = x(h), W3 = v(h)
        let dt = h / EM_SUBSTEPS as f64;
        let mid = (alpha * EM_SUBSTEPS as f64).round() as usize;
        let kick = 2.0 * (u * dt).sqrt();
        let mut r = RngStream::new(80 + i as u64);
        let em = second_moments(3, EM_PATHS, |w| {
            let (mut x, mut v, mut x_mid) = (0.0, 0.0, 0.0);
            for k in 0..EM_SUBSTEPS {
                if k == mid {
                    x_mid = x;
                }
                x += v * dt;
                v += -2.0 * v * dt + kick * r.normal();
            }
            w.copy_from_slice(&[x_mid, x, v]);
        });
        let e = max_rel(&exact, &em);
        ok &= e <= 0.02;
        details.push(format!("ShenLee(α={alpha}, h={h}, u={u}) {:.2}%", 100.0 * e));
    }
    verdict("noise covariance vs Euler-Maruyama", ok, format!("max relative entry error: {}", details.join(", ")));
}

#[test]
fn sequential_end_to_end_tv() {
    let _g = lock();
    let start = Instant::now();
    let model = two_bump_mixture(2);
    let c = ScheduleConstants::default();
    let sched = make_sequential_schedule_with(model.smoothness(), 2, 0.3, model.m2(), &c).unwrap();
    let (x, work) =
        sample_sequential(100_000, &sched, &model, PredictorKind::RandomizedMidpoint, &RngStream::new(6)).unwrap();
    let tv = tv_estimate(&x, &model, &RngStream::new(7)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "sequential end-to-end TV",
        tv.value <= 0.3 && secs <= 900.0,
        format!("TV {:.4} ± {:.4}, {} score evaluations, constants all 1, {secs:.1}s", tv.value, tv.stderr, work.score_evaluations),
    );
}

fn parallel_run(d: usize, n: usize, seed: u64) -> (Batch, WorkReport, TargetModel) {
    let model = two_bump_mixture(d);
    let sched = make_parallel_schedule(model.smoothness(), d, 0.3, model.m2(), 2.0).unwrap();
    let (x, w) = sample_parallel(n, &sched, &model, &RngStream::new(seed)).unwrap();
    (x, w, model)
}

#[test]
fn parallel_end_to_end() {
    let _g = lock();
    let (eps, beta) = (0.3f64, 2.0f64);
    let (x, w2d, model) = parallel_run(2, 100_000, 8);
    let tv = tv_estimate(&x, &model, &RngStream::new(9)).unwrap();
    let (_, w8d, _) = parallel_run(8, 200, 8);
    let budget = |d: f64| 40.0 * (d * beta / eps).log2();
    let rounds_ok = (w2d.parallel_rounds as f64) <= budget(2.0);
    let gap = w8d.parallel_rounds.abs_diff(w2d.parallel_rounds);
    let growth = w8d.score_evaluations as f64 / w2d.score_evaluations as f64;
    verdict(
        "parallel end-to-end",
        tv.value <= 0.3 && rounds_ok && gap <= 8 && growth >= 1.5,
        format!(
            "TV {:.4}; rounds d=2: {} (pred {}, corr {}) vs budget {:.1}; d=8: {} vs budget {:.1}; round gap {gap}; evaluation growth {growth:.2}x",
            tv.value,
            w2d.parallel_rounds,
            w2d.predictor_rounds,
            w2d.corrector_rounds,
            budget(2.0),
            w8d.parallel_rounds,
            budget(8.0)
        ),
    );
}

#[test]
fn logconcave_tv() {
    let _g = lock();
    let start = Instant::now();
    let model = TargetModel::quadratic_log_concave(vec![0.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 0.25]]).unwrap();
    let run = |eps: f64| {
        let s = make_logconcave_schedule(model.strong_convexity(), model.smoothness(), 2, eps).unwrap();
        let out = run_logconcave(&model, &s, 100_000, &RngStream::new(10)).unwrap();
        (tv_estimate(&out.samples, &model, &RngStream::new(11)).unwrap(), s.n_rand.unwrap())
    };
    let (a, na) = run(0.3);
    let (b, nb) = run(0.15);
    let secs = start.elapsed().as_secs_f64();
    let slack = 2.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
    verdict(
        "log-concave TV",
        a.value <= 0.3 && b.value <= a.value + slack && secs <= 600.0,
        format!(
            "κ={}, eps=0.3: TV {:.4} ± {:.4} ({na} steps); eps=0.15: TV {:.4} ± {:.4} ({nb} steps); {secs:.1}s",
            model.smoothness() / model.strong_convexity(),
            a.value,
            a.stderr,
            b.value,
            b.stderr
        ),
    );
}

#[test]
fn helper_lemma_checks() {
    let _g = lock();
    let targets = [
        ("N(0,4)", TargetModel::isotropic_gaussian(vec![0.0], 4.0).unwrap()),
        ("N(0,I2)", TargetModel::standard_normal(2).unwrap()),
        ("N(0,diag(1,1/4))", TargetModel::anisotropic_gaussian(vec![0.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 0.25]]).unwrap()),
        ("mixture", two_bump_mixture(2)),
    ];
    let mut norm_ok = true;
    let mut slope = f64::NAN;
    for (i, (name, m)) in targets.iter().enumerate() {
        let rows = check_helper_lemmas(m, &[0.01, 0.1, 1.0], 100_000, &RngStream::new(12 + i as u64)).unwrap();
        for r in rows.iter().filter(|r| r.lemma == "score_norm") {
            println!("    {name} t={}: E|s|^2 = {:.4} <= {:.4}", r.t, r.value, r.bound);
            norm_ok &= r.pass;
        }
        if i == 0 {
            slope = rows.iter().find(|r| r.lemma == "ou_tv_slope").unwrap().value;
        }
    }
    let (lo, hi) = MIXING_SLOPE_RANGE;
    verdict(
        "helper-lemma checks",
        norm_ok && slope >= lo && slope <= hi,
        format!("score-norm bounds hold: {norm_ok}; d ln TV(q_T, N(0,1)) / dT for N(0,4) = {slope:.3} (accepted [{lo}, {hi}])"),
    );
}

#[test]
fn determinism_across_runs_and_workers() {
    let _g = lock();
    let model = two_bump_mixture(2);
    let sched = make_parallel_schedule(model.smoothness(), 2, 0.3, model.m2(), 2.0).unwrap();
    let run = |workers: usize| {
        WorkerPool::new(workers)
            .unwrap()
            .install(|| sample_parallel(3000, &sched, &model, &RngStream::new(13)).unwrap().0.to_le_bytes())
    };
    let base = run(1);
    let again = run(1);
    let same = [4, 8].iter().all(|&w| run(w) == base);
    let other = WorkerPool::new(1)
        .unwrap()
        .install(|| sample_parallel(3000, &sched, &model, &RngStream::new(14)).unwrap().0.to_le_bytes());
    verdict(
        "determinism",
        base == again && same && other != base,
        format!("repeat identical: {}, workers 4/8 identical to 1: {same}, other seed differs: {}", base == again, other != base),
    );
}
