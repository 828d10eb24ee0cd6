//! Classical fourth-order Runge–Kutta solution of the probability-flow ODE,
//! used as a high-accuracy reference for the discretized samplers.

use crate::batch::{for_each_chunk, Batch};
use crate::error::{Result, SamplerError};
use crate::target::ScoreSource;

/// Integrates `dx/ds = x + score(t0 - s, x)` for one point from forward time
/// `t_from` down to `t_to` with `n_steps` equal steps, in place.
pub fn rk4_point<S: ScoreSource + ?Sized>(score: &S, x: &mut [f64], t_from: f64, t_to: f64, n_steps: usize) {
    let d = x.len();
    let h = (t_from - t_to) / n_steps as f64;
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut y = vec![0.0; d];
    let drift = |t: f64, p: &[f64], out: &mut [f64]| {
        score.score_batch(t, p, out);
        for (o, pi) in out.iter_mut().zip(p) {
            *o += pi;
        }
    };
    for n in 0..n_steps {
        let t = t_from - n as f64 * h;
        drift(t, x, &mut k1);
        for i in 0..d {
            y[i] = x[i] + 0.5 * h * k1[i];
        }
        drift(t - 0.5 * h, &y, &mut k2);
        for i in 0..d {
            y[i] = x[i] + 0.5 * h * k2[i];
        }
        drift(t - 0.5 * h, &y, &mut k3);
        for i in 0..d {
            y[i] = x[i] + h * k3[i];
        }
        drift(t - h, &y, &mut k4);
        for i in 0..d {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

/// Batch version of [`rk4_point`] with step at most `max_step`.
pub fn rk4_flow<S: ScoreSource + ?Sized>(score: &S, x0: &Batch, t_from: f64, t_to: f64, max_step: f64) -> Result<Batch> {
    if !(t_from >= t_to && t_to >= 0.0) || !(max_step > 0.0) {
        return Err(SamplerError::InvalidParameter(format!(
            "reference flow needs t_from >= t_to >= 0 and a positive step, got {t_from} -> {t_to}, step {max_step}"
        )));
    }
    let d = x0.dim();
    if score.dim() != d {
        return Err(SamplerError::DimensionMismatch { expected: score.dim(), got: d });
    }
    let n_steps = ((t_from - t_to) / max_step).ceil().max(1.0) as usize;
    let h = (t_from - t_to) / n_steps as f64;
    let mut data = x0.as_slice().to_vec();
    for_each_chunk(&mut data, d, |_, rows| {
        let m = rows.len();
        let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        let mut y = vec![0.0; m];
        let drift = |t: f64, p: &[f64], out: &mut [f64]| {
            score.score_batch(t, p, out);
            for (o, pi) in out.iter_mut().zip(p) {
                *o += pi;
            }
        };
        for n in 0..n_steps {
            let t = t_from - n as f64 * h;
            drift(t, rows, &mut k1);
            for i in 0..m {
                y[i] = rows[i] + 0.5 * h * k1[i];
            }
            drift(t - 0.5 * h, &y, &mut k2);
            for i in 0..m {
                y[i] = rows[i] + 0.5 * h * k2[i];
            }
            drift(t - 0.5 * h, &y, &mut k3);
            for i in 0..m {
                y[i] = rows[i] + h * k3[i];
            }
            drift(t - h, &y, &mut k4);
            for i in 0..m {
                rows[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        Ok(())
    })?;
    Batch::new(d, data)
}
