//! Underdamped Langevin Monte Carlo corrector.
//!
//! For a fixed score `s` and friction `gamma`, the dynamics
//! `dx = v dt`, `dv = (s(x) - gamma v) dt + sqrt(2 gamma) dB`
//! leave `q ⊗ N(0, I)` invariant. Each step freezes `s` at the step start and
//! integrates the remaining linear SDE exactly.

use crate::batch::{for_each_chunk, row_is_stable, Batch};
use crate::error::{Result, SamplerError};
use crate::rng::{RngStream, UldNoiseBlock, UldNoiseLaw};
use crate::schedule::corrector_grid;
use crate::target::ScoreSource;

/// Positions and velocities of a batch, plus the time elapsed inside the corrector.
#[derive(Debug, Clone, PartialEq)]
pub struct UldState {
    pub x: Batch,
    pub v: Batch,
    pub t_elapsed: f64,
}

/// Deterministic coefficients of one frozen-score step.
#[derive(Debug, Clone, Copy)]
pub(crate) struct UldCoefficients {
    /// `e^{-gamma h}`
    pub decay: f64,
    /// `(1 - e^{-gamma h}) / gamma`
    pub a: f64,
    /// `(h - a) / gamma`
    pub b: f64,
}

impl UldCoefficients {
    pub fn new(h: f64, gamma: f64) -> Self {
        let a = -(-gamma * h).exp_m1() / gamma;
        // (h - a) / gamma loses precision for small gamma h; use the series there.
        let z = gamma * h;
        let b = if z < 1e-3 {
            h * h * (0.5 - z / 6.0 + z * z / 24.0)
        } else {
            (h - a) / gamma
        };
        Self { decay: (-z).exp(), a, b }
    }

    #[inline]
    pub fn apply(&self, x: &mut [f64], v: &mut [f64], s: &[f64], zx: &[f64], zv: &[f64]) {
        for i in 0..x.len() {
            let vi = v[i];
            x[i] += self.a * vi + self.b * s[i] + zx[i];
            v[i] = self.decay * vi + self.a * s[i] + zv[i];
        }
    }
}

/// One step of duration `noise.step` for a single particle, with `s` the
/// (frozen) score at `x`. Noise is already scaled.
pub fn uld_step_with_score(x: &mut [f64], v: &mut [f64], s: &[f64], noise: &UldNoiseBlock) {
    UldCoefficients::new(noise.step, noise.gamma).apply(x, v, s, &noise.zeta_x, &noise.zeta_v);
}

/// One step for a batch at fixed score time `t_score`, with one noise block per particle.
pub fn uld_step<S: ScoreSource + ?Sized>(
    state: &mut UldState,
    h: f64,
    gamma: f64,
    t_score: f64,
    score: &S,
    noise: &[UldNoiseBlock],
) -> Result<()> {
    let d = state.x.dim();
    if noise.len() != state.x.len() {
        return Err(SamplerError::DimensionMismatch { expected: state.x.len(), got: noise.len() });
    }
    if noise.iter().any(|b| b.step != h || b.gamma != gamma || b.zeta_x.len() != d) {
        return Err(SamplerError::InvalidParameter("noise block does not match (h, gamma, d)".into()));
    }
    let mut s = vec![0.0; state.x.as_slice().len()];
    score.score_batch(t_score, state.x.as_slice(), &mut s);
    let coef = UldCoefficients::new(h, gamma);
    let elapsed = state.t_elapsed;
    for (i, nb) in noise.iter().enumerate() {
        let si = &s[i * d..(i + 1) * d];
        if !row_is_stable(si) {
            return Err(SamplerError::CorrectorBlowUp { elapsed, step: 0 });
        }
        let x = &mut state.x.as_mut_slice()[i * d..(i + 1) * d];
        let v = &mut state.v.as_mut_slice()[i * d..(i + 1) * d];
        coef.apply(x, v, si, &nb.zeta_x, &nb.zeta_v);
        if !row_is_stable(x) || !row_is_stable(v) {
            return Err(SamplerError::CorrectorBlowUp { elapsed: elapsed + h, step: 0 });
        }
    }
    state.t_elapsed += h;
    Ok(())
}

/// Runs frozen-score ULMC over `steps` from a given `(x, v)`. Randomness is
/// keyed by chunk index below `rng`.
pub fn run_uld<S: ScoreSource + ?Sized>(
    state: UldState,
    steps: &[f64],
    gamma: f64,
    t_score: f64,
    score: &S,
    rng: &RngStream,
) -> Result<UldState> {
    let d = state.x.dim();
    if state.v.dim() != d || state.v.len() != state.x.len() {
        return Err(SamplerError::DimensionMismatch { expected: state.x.as_slice().len(), got: state.v.as_slice().len() });
    }
    let laws = steps.iter().map(|&h| UldNoiseLaw::new(h, gamma)).collect::<Result<Vec<_>>>()?;
    let coefs: Vec<UldCoefficients> = steps.iter().map(|&h| UldCoefficients::new(h, gamma)).collect();
    let t0 = state.t_elapsed;
    // interleave x and v per particle so one chunk owns both
    let n = state.x.len();
    let mut xv = Vec::with_capacity(2 * n * d);
    for (x, v) in state.x.rows().zip(state.v.rows()) {
        xv.extend_from_slice(x);
        xv.extend_from_slice(v);
    }
    for_each_chunk(&mut xv, 2 * d, |c, rows| {
        let mut r = rng.fork(c as u64);
        let n_rows = rows.len() / (2 * d);
        let mut xs = vec![0.0; n_rows * d];
        let mut s = vec![0.0; n_rows * d];
        let mut zx = vec![0.0; d];
        let mut zv = vec![0.0; d];
        let mut elapsed = t0;
        for (k, (law, coef)) in laws.iter().zip(&coefs).enumerate() {
            for (i, row) in rows.chunks_exact(2 * d).enumerate() {
                xs[i * d..(i + 1) * d].copy_from_slice(&row[..d]);
            }
            score.score_batch(t_score, &xs, &mut s);
            for (i, row) in rows.chunks_exact_mut(2 * d).enumerate() {
                let si = &s[i * d..(i + 1) * d];
                if !row_is_stable(si) {
                    return Err(SamplerError::CorrectorBlowUp { elapsed, step: k });
                }
                law.sample_into(&mut r, &mut zx, &mut zv);
                let (x, v) = row.split_at_mut(d);
                coef.apply(x, v, si, &zx, &zv);
                if !row_is_stable(row) {
                    return Err(SamplerError::CorrectorBlowUp { elapsed: elapsed + law.delta, step: k });
                }
            }
            elapsed += law.delta;
        }
        Ok(())
    })?;
    let mut x = Vec::with_capacity(n * d);
    let mut v = Vec::with_capacity(n * d);
    for row in xv.chunks_exact(2 * d) {
        x.extend_from_slice(&row[..d]);
        v.extend_from_slice(&row[d..]);
    }
    Ok(UldState { x: Batch::new(d, x)?, v: Batch::new(d, v)?, t_elapsed: t0 + steps.iter().sum::<f64>() })
}

/// Draws `v ~ N(0, scale I)` for every particle, keyed by chunk.
pub(crate) fn fresh_velocities(n: usize, d: usize, scale: f64, rng: &RngStream) -> Result<Batch> {
    let mut v = vec![0.0; n * d];
    let sd = scale.sqrt();
    for_each_chunk(&mut v, d, |c, rows| {
        let mut r = rng.fork(c as u64);
        r.fill_normal(rows);
        rows.iter_mut().for_each(|x| *x *= sd);
        Ok(())
    })?;
    Batch::new(d, v)
}

/// The corrector: fresh `v ~ N(0, I)`, ULMC for duration `t_corr` at step
/// `h_corr` (last step shortened) with the score frozen at forward time
/// `t_score`, velocities discarded at the end.
pub fn run_corrector<S: ScoreSource + ?Sized>(
    x0: Batch,
    t_score: f64,
    t_corr: f64,
    h_corr: f64,
    gamma: f64,
    score: &S,
    rng: &RngStream,
) -> Result<Batch> {
    if !(t_corr >= 0.0) || !(h_corr > 0.0) || !(gamma > 0.0) {
        return Err(SamplerError::InvalidParameter(format!(
            "corrector needs t_corr >= 0, h_corr > 0, gamma > 0; got {t_corr}, {h_corr}, {gamma}"
        )));
    }
    let steps = corrector_grid(t_corr, h_corr);
    if steps.is_empty() {
        return Ok(x0);
    }
    let v = fresh_velocities(x0.len(), x0.dim(), 1.0, &rng.fork(0))?;
    let out = run_uld(UldState { x: x0, v, t_elapsed: 0.0 }, &steps, gamma, t_score, score, &rng.fork(1))?;
    Ok(out.x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target::{ScoreFn, TargetModel};
    use approx::assert_relative_eq;

    fn quiet(h: f64, gamma: f64) -> UldNoiseBlock {
        UldNoiseBlock { zeta_x: vec![0.0], zeta_v: vec![0.0], step: h, gamma }
    }

    #[test]
    fn no_velocity_no_force_no_motion() {
        let (mut x, mut v) = (vec![0.4], vec![0.0]);
        uld_step_with_score(&mut x, &mut v, &[0.0], &quiet(0.3, 2.0));
        assert_eq!(x, vec![0.4]);
        assert_eq!(v, vec![0.0]);
    }

    #[test]
    fn free_flight_distance() {
        let (mut x, mut v) = (vec![0.0], vec![1.0]);
        uld_step_with_score(&mut x, &mut v, &[0.0], &quiet(1.0, 1.0));
        assert_relative_eq!(x[0], 1.0 - (-1.0f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(v[0], (-1.0f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn small_step_coefficient_matches_closed_form() {
        for &(h, g) in &[(1e-4, 1.0), (0.02, 0.04), (0.5, 3.0)] {
            let c = UldCoefficients::new(h, g);
            let a = (1.0 - (-g * h as f64).exp()) / g;
            assert_relative_eq!(c.b, (h - a) / g, max_relative = 1e-6);
        }
    }

    #[test]
    fn batch_step_matches_pointwise() {
        let m = TargetModel::standard_normal(2).unwrap();
        let x = Batch::new(2, vec![0.5, -0.2, 1.0, 0.3]).unwrap();
        let v = Batch::new(2, vec![0.1, 0.0, -0.4, 0.2]).unwrap();
        let law = UldNoiseLaw::new(0.1, 1.5).unwrap();
        let mut r = RngStream::new(4);
        let noise = vec![law.sample(&mut r, 2), law.sample(&mut r, 2)];
        let mut st = UldState { x: x.clone(), v: v.clone(), t_elapsed: 0.0 };
        uld_step(&mut st, 0.1, 1.5, 0.0, &m, &noise).unwrap();
        let (mut x0, mut v0) = (x.row(1).to_vec(), v.row(1).to_vec());
        let s: Vec<f64> = x0.iter().map(|a| -a).collect();
        uld_step_with_score(&mut x0, &mut v0, &s, &noise[1]);
        assert_eq!(st.x.row(1), &x0[..]);
        assert_eq!(st.v.row(1), &v0[..]);
        assert_relative_eq!(st.t_elapsed, 0.1);
    }

    #[test]
    fn corrector_reports_blow_up() {
        let bad = ScoreFn::new(1, |_, x: &[f64], out: &mut [f64]| out[0] = 1e12 * x[0]);
        let x = Batch::new(1, vec![1.0; 4]).unwrap();
        let err = run_corrector(x, 0.5, 1.0, 0.1, 1.0, &bad, &RngStream::new(1)).unwrap_err();
        assert!(matches!(err, SamplerError::CorrectorBlowUp { .. }));
    }

    #[test]
    fn corrector_is_deterministic() {
        let m = TargetModel::standard_normal(3).unwrap();
        let x = m.sample_exact(0.0, 700, &RngStream::new(1)).unwrap();
        let a = run_corrector(x.clone(), 0.0, 0.5, 0.05, 1.0, &m, &RngStream::new(2)).unwrap();
        let b = run_corrector(x, 0.0, 0.5, 0.05, 1.0, &m, &RngStream::new(2)).unwrap();
        assert_eq!(a, b);
    }
}
