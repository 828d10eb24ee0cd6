//! Sequential predictors for the probability-flow ODE.
//!
//! Time runs backwards in the forward-process clock: a step of size `h` from
//! `t` lands at `t - h`. Writing the flow as `dx = (x + s_t(x)) ds`, the linear
//! part is integrated exactly and only the score integral is approximated.
//!
//! * The exponential integrator freezes the score at the step start.
//! * The randomized midpoint estimates `∫_0^h e^{h-r} s_{t-r}(x_r) dr` by
//!   `h e^{(1-α)h} s_{t-αh}(x_{αh})` with `α ~ U[0, 1]` and `x_{αh}` itself
//!   predicted by an exponential-integrator half step. The estimate is
//!   unbiased along any frozen trajectory.

use crate::batch::{for_each_chunk, row_is_stable, Batch};
use crate::error::{Result, SamplerError};
use crate::rng::{uniform_midpoint, RngStream};
use crate::target::ScoreSource;

/// A batch of particles at a common forward time.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState {
    pub x: Batch,
    pub t: f64,
    pub step_index: usize,
}

impl PredictorState {
    pub fn new(x: Batch, t: f64) -> Self {
        Self { x, t, step_index: 0 }
    }
}

fn eval_score<S: ScoreSource + ?Sized>(score: &S, t: f64, x: &[f64], step: usize) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SamplerError::InvalidState(format!("non-finite particle at t = {t}, step = {step}")));
    }
    let mut s = vec![0.0; x.len()];
    score.score_batch(t, x, &mut s);
    if s.iter().any(|v| !v.is_finite()) {
        return Err(SamplerError::ScoreBlowUp { t, step });
    }
    Ok(s)
}

#[inline]
fn half_step_kernel(x: &[f64], s: &[f64], grow: f64, out: &mut [f64]) {
    // e^{αh} x + (e^{αh} - 1) s, with grow = e^{αh} - 1
    for ((o, xi), si) in out.iter_mut().zip(x).zip(s) {
        *o = xi + grow * (xi + si);
    }
}

#[inline]
fn full_step_kernel(x: &mut [f64], s_mid: &[f64], h: f64, alpha: f64) {
    let eh = h.exp();
    let w = h * ((1.0 - alpha) * h).exp();
    for (xi, si) in x.iter_mut().zip(s_mid) {
        *xi = eh * *xi + w * si;
    }
}

/// Midpoint estimate `e^{αh} x + (e^{αh} - 1) s_t(x)` for one particle at time `t`.
pub fn midpoint_half_step<S: ScoreSource + ?Sized>(x: &[f64], t: f64, h: f64, alpha: f64, score: &S) -> Result<Vec<f64>> {
    check_step(h, alpha)?;
    let s = eval_score(score, t, x, 0)?;
    let mut out = vec![0.0; x.len()];
    half_step_kernel(x, &s, (alpha * h).exp_m1(), &mut out);
    Ok(out)
}

/// Full randomized-midpoint step from time `t` to `t - h` given the midpoint estimate.
pub fn midpoint_full_step<S: ScoreSource + ?Sized>(
    x: &[f64],
    t: f64,
    h: f64,
    alpha: f64,
    x_half: &[f64],
    score: &S,
) -> Result<Vec<f64>> {
    check_step(h, alpha)?;
    let s = eval_score(score, t - alpha * h, x_half, 0)?;
    let mut out = x.to_vec();
    full_step_kernel(&mut out, &s, h, alpha);
    Ok(out)
}

/// Exponential-integrator step `e^h x + (e^h - 1) s_t(x)`.
pub fn exp_integrator_step<S: ScoreSource + ?Sized>(x: &[f64], t: f64, h: f64, score: &S) -> Result<Vec<f64>> {
    check_step(h, 0.0)?;
    let s = eval_score(score, t, x, 0)?;
    let mut out = vec![0.0; x.len()];
    half_step_kernel(x, &s, h.exp_m1(), &mut out);
    Ok(out)
}

fn check_step(h: f64, alpha: f64) -> Result<()> {
    if !(h > 0.0) || !(0.0..=1.0).contains(&alpha) {
        return Err(SamplerError::InvalidParameter(format!("need h > 0 and 0 <= alpha <= 1, got h = {h}, alpha = {alpha}")));
    }
    Ok(())
}

fn check_schedule(state: &PredictorState, steps: &[f64]) -> Result<()> {
    if steps.iter().any(|&h| !(h > 0.0)) {
        return Err(SamplerError::InvalidParameter("predictor steps must be positive".into()));
    }
    let total: f64 = steps.iter().sum();
    if total > state.t * (1.0 + 1e-12) {
        return Err(SamplerError::InvalidParameter(format!(
            "steps cover {total}, more than the starting time {}",
            state.t
        )));
    }
    Ok(())
}

/// Runs the randomized-midpoint predictor over `steps`, drawing a fresh `α`
/// for every particle and step. Particle randomness is keyed by chunk index.
pub fn run_predictor<S: ScoreSource + ?Sized>(
    state: PredictorState,
    steps: &[f64],
    score: &S,
    rng: &RngStream,
) -> Result<PredictorState> {
    check_schedule(&state, steps)?;
    let d = state.x.dim();
    let t0 = state.t;
    let step0 = state.step_index;
    let mut data = state.x.into_vec();
    for_each_chunk(&mut data, d, |c, rows| {
        let mut r = rng.fork(c as u64);
        let n_rows = rows.len() / d;
        let mut s0 = vec![0.0; rows.len()];
        let mut x_half = vec![0.0; d];
        let mut s_mid = vec![0.0; d];
        let mut alphas = vec![0.0; n_rows];
        let mut t = t0;
        for (n, &h) in steps.iter().enumerate() {
            let step = step0 + n;
            score.score_batch(t, rows, &mut s0);
            for a in alphas.iter_mut() {
                *a = uniform_midpoint(&mut r, 1, 1);
            }
            for (i, (x, s)) in rows.chunks_exact_mut(d).zip(s0.chunks_exact(d)).enumerate() {
                if !row_is_stable(s) {
                    return Err(SamplerError::ScoreBlowUp { t, step });
                }
                let alpha = alphas[i];
                half_step_kernel(x, s, (alpha * h).exp_m1(), &mut x_half);
                let t_mid = t - alpha * h;
                score.score_batch(t_mid, &x_half, &mut s_mid);
                if !row_is_stable(&s_mid) {
                    return Err(SamplerError::ScoreBlowUp { t: t_mid, step });
                }
                full_step_kernel(x, &s_mid, h, alpha);
                if !row_is_stable(x) {
                    return Err(SamplerError::ScoreBlowUp { t: t - h, step });
                }
            }
            t -= h;
        }
        Ok(())
    })?;
    Ok(PredictorState { x: Batch::new(d, data)?, t: t0 - steps.iter().sum::<f64>(), step_index: step0 + steps.len() })
}

/// Runs the exponential-integrator baseline over `steps`.
pub fn run_exp_integrator<S: ScoreSource + ?Sized>(state: PredictorState, steps: &[f64], score: &S) -> Result<PredictorState> {
    check_schedule(&state, steps)?;
    let d = state.x.dim();
    let t0 = state.t;
    let step0 = state.step_index;
    let mut data = state.x.into_vec();
    for_each_chunk(&mut data, d, |_, rows| {
        let mut s = vec![0.0; rows.len()];
        let mut t = t0;
        for (n, &h) in steps.iter().enumerate() {
            score.score_batch(t, rows, &mut s);
            let grow = h.exp_m1();
            for (x, si) in rows.chunks_exact_mut(d).zip(s.chunks_exact(d)) {
                if !row_is_stable(si) {
                    return Err(SamplerError::ScoreBlowUp { t, step: step0 + n });
                }
                for (xi, sv) in x.iter_mut().zip(si) {
                    *xi += grow * (*xi + sv);
                }
                if !row_is_stable(x) {
                    return Err(SamplerError::ScoreBlowUp { t: t - h, step: step0 + n });
                }
            }
            t -= h;
        }
        Ok(())
    })?;
    Ok(PredictorState { x: Batch::new(d, data)?, t: t0 - steps.iter().sum::<f64>(), step_index: step0 + steps.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target::{ScoreFn, TargetModel};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn zero_score(d: usize) -> ScoreFn<impl Fn(f64, &[f64], &mut [f64]) + Sync> {
        ScoreFn::new(d, |_, _, out: &mut [f64]| out.iter_mut().for_each(|o| *o = 0.0))
    }

    #[test]
    fn half_step_free_drift() {
        let out = midpoint_half_step(&[1.0], 1.0, 0.1, 0.5, &zero_score(1)).unwrap();
        assert_relative_eq!(out[0], 0.05f64.exp(), max_relative = 1e-15);
    }

    #[test]
    fn full_step_stationary_alpha_one() {
        let m = TargetModel::standard_normal(1).unwrap();
        let out = midpoint_full_step(&[1.0], 1.0, 0.1, 1.0, &[1.0], &m).unwrap();
        assert_relative_eq!(out[0], 0.1f64.exp() - 0.1, max_relative = 1e-14);
    }

    #[test]
    fn exp_integrator_free_drift() {
        let out = exp_integrator_step(&[1.0], 1.0, 0.1, &zero_score(1)).unwrap();
        assert_relative_eq!(out[0], 0.1f64.exp(), max_relative = 1e-15);
    }

    #[test]
    fn alpha_average_of_stationary_step_is_identity() {
        let m = TargetModel::standard_normal(1).unwrap();
        let h = 0.3;
        let n = 1000;
        // midpoint rule over the alpha grid
        let avg: f64 = (0..n)
            .map(|k| {
                let a = (k as f64 + 0.5) / n as f64;
                let xh = midpoint_half_step(&[1.0], 1.0, h, a, &m).unwrap();
                midpoint_full_step(&[1.0], 1.0, h, a, &xh, &m).unwrap()[0]
            })
            .sum::<f64>()
            / n as f64;
        assert!((avg - 1.0).abs() < 1e-6, "{avg}");
    }

    #[test]
    fn blow_up_is_reported_with_provenance() {
        let bad = ScoreFn::new(1, |_, _, out: &mut [f64]| out[0] = f64::NAN);
        let st = PredictorState { x: Batch::new(1, vec![1.0; 10]).unwrap(), t: 1.0, step_index: 7 };
        let err = run_predictor(st, &[0.1], &bad, &RngStream::new(1)).unwrap_err();
        assert_eq!(err, SamplerError::ScoreBlowUp { t: 1.0, step: 7 });
        assert!(matches!(midpoint_half_step(&[1.0], 1.0, 0.1, 0.5, &bad), Err(SamplerError::ScoreBlowUp { .. })));
    }

    #[test]
    fn run_predictor_tracks_time_and_is_deterministic() {
        let m = TargetModel::isotropic_gaussian(vec![0.0, 0.0], 4.0).unwrap();
        let x = m.sample_exact(1.0, 1000, &RngStream::new(2)).unwrap();
        let steps = [0.1, 0.1, 0.05];
        let a = run_predictor(PredictorState::new(x.clone(), 1.0), &steps, &m, &RngStream::new(3)).unwrap();
        let b = run_predictor(PredictorState::new(x, 1.0), &steps, &m, &RngStream::new(3)).unwrap();
        assert_eq!(a, b);
        assert_relative_eq!(a.t, 0.75, max_relative = 1e-14);
        assert_eq!(a.step_index, 3);
    }

    #[test]
    fn rejects_overlong_schedule() {
        let m = TargetModel::standard_normal(1).unwrap();
        let st = PredictorState::new(Batch::new(1, vec![0.0]).unwrap(), 0.2);
        assert!(run_exp_integrator(st, &[0.15, 0.1], &m).is_err());
    }

    proptest! {
        #[test]
        fn stationary_score_fixes_points(x in -5.0..5.0f64, h in 0.001..1.0f64, a in 0.0..1.0f64) {
            let m = TargetModel::standard_normal(1).unwrap();
            let xh = midpoint_half_step(&[x], 2.0, h, a, &m).unwrap();
            prop_assert!((xh[0] - x).abs() <= 1e-12 * (1.0 + x.abs()));
            let e = exp_integrator_step(&[x], 2.0, h, &m).unwrap();
            prop_assert!((e[0] - x).abs() <= 1e-12 * (1.0 + x.abs()));
            let z = midpoint_half_step(&[x], 2.0, h, 0.0, &zero_score(1)).unwrap();
            prop_assert_eq!(z[0], x);
        }
    }
}
