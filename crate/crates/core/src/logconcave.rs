//! Randomized-midpoint discretization of underdamped Langevin dynamics for
//! strongly log-concave targets, followed by a short corrector.
//!
//! The dynamics use friction 2 and inverse mass `u = 1/L`:
//! `dx = v dt`, `dv = -2 v dt + u ∇ln p(x) dt + 2 sqrt(u) dB`,
//! whose invariant law is `p ⊗ N(0, u I)`. The drift integrals over a step are
//! estimated at one uniformly random time `αh`.

use crate::batch::{for_each_chunk, row_is_stable, Batch};
use crate::corrector::run_corrector;
use crate::error::{Result, SamplerError};
use crate::rng::{RngStream, ShenLeeNoiseBlock, ShenLeeNoiseLaw};
use crate::schedule::{Schedule, ScheduleMode};
use crate::target::{ScoreSource, TargetModel};

/// Positions and velocities of a batch with inverse mass `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShenLeeState {
    pub x: Batch,
    pub v: Batch,
    pub u: f64,
}

impl ShenLeeState {
    pub fn new(x: Batch, v: Batch, l: f64) -> Result<Self> {
        if x.dim() != v.dim() || x.len() != v.len() {
            return Err(SamplerError::DimensionMismatch { expected: x.as_slice().len(), got: v.as_slice().len() });
        }
        if !(l > 0.0) {
            return Err(SamplerError::InvalidParameter(format!("L must be positive, got {l}")));
        }
        Ok(Self { x, v, u: 1.0 / l })
    }
}

/// Deterministic coefficients of one step for a fixed `(α, h, u)`.
#[derive(Debug, Clone, Copy)]
struct StepCoefficients {
    half_v: f64,
    half_s: f64,
    full_v: f64,
    full_s: f64,
    decay: f64,
    vel_s: f64,
}

impl StepCoefficients {
    fn new(alpha: f64, h: f64, u: f64) -> Self {
        let a = alpha * h;
        let one_minus_e2a = -(-2.0 * a).exp_m1();
        let tail = (-2.0 * (h - a)).exp();
        Self {
            half_v: 0.5 * one_minus_e2a,
            half_s: 0.5 * u * (a - 0.5 * one_minus_e2a),
            full_v: 0.5 * -(-2.0 * h).exp_m1(),
            full_s: 0.5 * u * h * (1.0 - tail),
            decay: (-2.0 * h).exp(),
            vel_s: u * h * tail,
        }
    }
}

/// One step for a single particle. `score_at` evaluates `∇ln p`.
fn step_point(
    x: &mut [f64],
    v: &mut [f64],
    coef: &StepCoefficients,
    w1: &[f64],
    w2: &[f64],
    w3: &[f64],
    score_at: &mut dyn FnMut(&[f64], &mut [f64]),
    x_half: &mut [f64],
    s: &mut [f64],
) -> bool {
    let d = x.len();
    score_at(x, s);
    if !row_is_stable(s) {
        return false;
    }
    for k in 0..d {
        x_half[k] = x[k] + coef.half_v * v[k] + coef.half_s * s[k] + w1[k];
    }
    score_at(x_half, s);
    if !row_is_stable(s) {
        return false;
    }
    for k in 0..d {
        let vk = v[k];
        x[k] += coef.full_v * vk + coef.full_s * s[k] + w2[k];
        v[k] = coef.decay * vk + coef.vel_s * s[k] + w3[k];
    }
    row_is_stable(x) && row_is_stable(v)
}

/// One randomized-midpoint step of a single particle, given its noise triple.
pub fn shenlee_step<S: ScoreSource + ?Sized>(
    x: &mut [f64],
    v: &mut [f64],
    u: f64,
    noise: &ShenLeeNoiseBlock,
    score: &S,
) -> Result<()> {
    let d = x.len();
    let coef = StepCoefficients::new(noise.alpha, noise.h, u);
    let (mut xh, mut s) = (vec![0.0; d], vec![0.0; d]);
    let mut f = |p: &[f64], o: &mut [f64]| score.score_batch(0.0, p, o);
    if step_point(x, v, &coef, &noise.w1, &noise.w2, &noise.w3, &mut f, &mut xh, &mut s) {
        Ok(())
    } else {
        Err(SamplerError::ScoreBlowUp { t: 0.0, step: 0 })
    }
}

/// `n_steps` randomized-midpoint steps of size `h` with fresh `α` and noise per
/// particle and step. The score is evaluated at forward time 0.
pub fn run_shenlee<S: ScoreSource + ?Sized>(
    state: ShenLeeState,
    n_steps: usize,
    h: f64,
    score: &S,
    rng: &RngStream,
) -> Result<ShenLeeState> {
    if !(h > 0.0) {
        return Err(SamplerError::InvalidParameter(format!("step must be positive, got {h}")));
    }
    let d = state.x.dim();
    let n = state.x.len();
    let u = state.u;
    let mut xv = Vec::with_capacity(2 * n * d);
    for (x, v) in state.x.rows().zip(state.v.rows()) {
        xv.extend_from_slice(x);
        xv.extend_from_slice(v);
    }
    for_each_chunk(&mut xv, 2 * d, |c, rows| {
        let mut r = rng.fork(c as u64);
        let (mut w1, mut w2, mut w3) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let (mut xh, mut s) = (vec![0.0; d], vec![0.0; d]);
        let mut f = |p: &[f64], o: &mut [f64]| score.score_batch(0.0, p, o);
        for step in 0..n_steps {
            for row in rows.chunks_exact_mut(2 * d) {
                let alpha = r.uniform();
                let law = ShenLeeNoiseLaw::new(alpha, h, u)?;
                law.sample_into(&mut r, &mut w1, &mut w2, &mut w3);
                let coef = StepCoefficients::new(alpha, h, u);
                let (x, v) = row.split_at_mut(d);
                if !step_point(x, v, &coef, &w1, &w2, &w3, &mut f, &mut xh, &mut s) {
                    return Err(SamplerError::ScoreBlowUp { t: 0.0, step });
                }
            }
        }
        Ok(())
    })?;
    let mut x = Vec::with_capacity(n * d);
    let mut v = Vec::with_capacity(n * d);
    for row in xv.chunks_exact(2 * d) {
        x.extend_from_slice(&row[..d]);
        v.extend_from_slice(&row[d..]);
    }
    Ok(ShenLeeState { x: Batch::new(d, x)?, v: Batch::new(d, v)?, u })
}

/// Output of the log-concave sampler, with the pre-corrector batch kept for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LogConcaveOutput {
    pub before_corrector: Batch,
    pub samples: Batch,
}

/// Starts `n` particles at the mode with zero velocity, runs `N_rand`
/// randomized-midpoint steps and then the corrector.
pub fn run_logconcave(target: &TargetModel, schedule: &Schedule, n: usize, rng: &RngStream) -> Result<LogConcaveOutput> {
    run_logconcave_with_score(target, target, schedule, n, rng)
}

/// As [`run_logconcave`] but with a separate score source (e.g. a corrupted score).
pub fn run_logconcave_with_score<S: ScoreSource + ?Sized>(
    target: &TargetModel,
    score: &S,
    schedule: &Schedule,
    n: usize,
    rng: &RngStream,
) -> Result<LogConcaveOutput> {
    if schedule.mode != ScheduleMode::LogConcave {
        return Err(SamplerError::InvalidParameter("run_logconcave needs a log-concave schedule".into()));
    }
    let root = target.root()?;
    let d = target.dim();
    let mut x = Vec::with_capacity(n * d);
    for _ in 0..n {
        x.extend_from_slice(&root);
    }
    let state = ShenLeeState::new(Batch::new(d, x)?, Batch::zeros(n, d), schedule.l)?;
    let h = schedule.h_rand.unwrap_or(schedule.h_pred);
    let steps = schedule.n_rand.unwrap_or(0);
    let out = run_shenlee(state, steps, h, score, &rng.fork(1))?;
    let before = out.x;
    let samples =
        run_corrector(before.clone(), 0.0, schedule.t_corr, schedule.h_corr, schedule.gamma, score, &rng.fork(2))?;
    Ok(LogConcaveOutput { before_corrector: before, samples })
}
