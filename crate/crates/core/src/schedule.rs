//! Time grids and parameter settings for full sampler runs.
//!
//! Every hidden constant of the asymptotic step-size rules is exposed in
//! [`ScheduleConstants`] and defaults to 1.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SamplerError};

/// Multipliers applied to each asymptotic rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConstants {
    /// Start time `T`.
    pub c_t: f64,
    /// Early-stopping time `delta`.
    pub c_delta: f64,
    /// Sequential predictor step.
    pub c_hpred: f64,
    /// Corrector step (sequential and log-concave); scales `1/sqrt(8L)` in parallel mode.
    pub c_hcorr: f64,
    /// Corrector duration.
    pub c_tcorr: f64,
    /// Midpoint counts `R`.
    pub c_r: f64,
    /// Picard depth of the parallel predictor.
    pub c_k: f64,
    /// Log-concave randomized-midpoint step.
    pub c_hrand: f64,
    /// Log-concave randomized-midpoint step count.
    pub c_nrand: f64,
}

impl Default for ScheduleConstants {
    fn default() -> Self {
        Self { c_t: 1.0, c_delta: 1.0, c_hpred: 1.0, c_hcorr: 1.0, c_tcorr: 1.0, c_r: 1.0, c_k: 1.0, c_hrand: 1.0, c_nrand: 1.0 }
    }
}

impl ScheduleConstants {
    fn validate(&self) -> Result<()> {
        let all = [
            ("c_t", self.c_t),
            ("c_delta", self.c_delta),
            ("c_hpred", self.c_hpred),
            ("c_hcorr", self.c_hcorr),
            ("c_tcorr", self.c_tcorr),
            ("c_r", self.c_r),
            ("c_k", self.c_k),
            ("c_hrand", self.c_hrand),
            ("c_nrand", self.c_nrand),
        ];
        for (name, v) in all {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SamplerError::InvalidParameter(format!("{name} must be a positive number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleMode {
    Sequential,
    Parallel,
    LogConcave,
}

/// One parallel-predictor window: `r` randomized midpoints refined by `k` Picard rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub t_start: f64,
    pub t_end: f64,
    pub h: f64,
    pub r: usize,
    pub k: usize,
}

/// A predictor phase followed by a corrector at `t_end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub t_start: f64,
    pub t_end: f64,
    /// Sequential predictor steps (empty in parallel mode).
    pub steps: Vec<f64>,
    /// Parallel predictor windows (empty in sequential mode).
    pub windows: Vec<Window>,
}

impl Block {
    pub fn duration(&self) -> f64 {
        self.t_start - self.t_end
    }
}

/// Settings of the parallel underdamped corrector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParallelCorrector {
    /// Outer step.
    pub h: f64,
    /// Sub-steps per outer step.
    pub r: usize,
    /// Picard rounds per outer step.
    pub k: usize,
}

/// A complete, immutable plan for one sampler run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub mode: ScheduleMode,
    pub dim: usize,
    pub l: f64,
    pub eps: f64,
    /// Start forward time `T` (0 in log-concave mode).
    pub t_max: f64,
    /// End forward time.
    pub delta: f64,
    pub h_pred: f64,
    pub t_corr: f64,
    pub h_corr: f64,
    pub gamma: f64,
    /// Number of full-length predictor/corrector blocks before the tail.
    pub n0: usize,
    /// Geometric tail steps of the sequential predictor (also the last block's steps).
    pub tail_steps: Vec<f64>,
    pub blocks: Vec<Block>,
    pub parallel: Option<ParallelCorrector>,
    pub beta: Option<f64>,
    pub m: Option<f64>,
    pub h_rand: Option<f64>,
    pub n_rand: Option<usize>,
    pub constants: ScheduleConstants,
    /// Out-of-range warnings and clamps applied while building.
    pub notes: Vec<String>,
}

fn check_common(l: f64, d: usize, eps: f64, notes: &mut Vec<String>) -> Result<()> {
    if d == 0 {
        return Err(SamplerError::InvalidParameter("dimension must be positive".into()));
    }
    if !(l > 0.0 && l.is_finite()) || !(eps > 0.0 && eps.is_finite()) {
        return Err(SamplerError::InvalidParameter(format!("need L > 0 and eps > 0, got L = {l}, eps = {eps}")));
    }
    if eps >= 1.0 {
        notes.push(format!("parameter out of theorem range: eps = {eps} >= 1"));
    }
    if l < 1.0 {
        notes.push(format!("parameter out of theorem range: L = {l} < 1"));
    }
    Ok(())
}

/// `log(m2)`, clamped below by 1 so the step rules stay finite for small second moments.
fn clamped_log_m2(m2: f64, notes: &mut Vec<String>) -> f64 {
    let lg = m2.ln();
    if !(lg >= 1.0) {
        notes.push(format!("log(m2) = {lg:.4} clamped to 1"));
        1.0
    } else {
        lg
    }
}

fn horizon(d: usize, eps: f64, m2: f64, c: &ScheduleConstants, l: f64) -> (f64, f64) {
    let dm = (d as f64).max(m2 * m2);
    let t_max = c.c_t * (dm / (eps * eps)).ln();
    let delta = c.c_delta * eps * eps / (l * l * dm);
    (t_max, delta)
}

/// Geometric steps `h/2, h/4, ...` from `t_start` down to `delta`, with one
/// exact closing step.
fn geometric_tail(t_start: f64, delta: f64, h_pred: f64) -> Vec<f64> {
    let mut steps = Vec::new();
    let mut t = t_start;
    let mut s = h_pred / 2.0;
    while s > t / 2.0 {
        s /= 2.0;
    }
    while t > delta {
        if t - s <= delta {
            steps.push(t - delta);
            break;
        }
        steps.push(s);
        t -= s;
        s /= 2.0;
    }
    steps
}

/// Sequential predictor-corrector schedule.
///
/// Full blocks of length `1/L` (the last one shortened) carry the sample from
/// `T` down to `h_pred` with equal steps no larger than `h_pred`; the tail then
/// halves the step down to `delta`. A corrector runs after every block at the
/// block's end time.
pub fn make_sequential_schedule(l: f64, d: usize, eps: f64, m2: f64) -> Result<Schedule> {
    make_sequential_schedule_with(l, d, eps, m2, &ScheduleConstants::default())
}

pub fn make_sequential_schedule_with(l: f64, d: usize, eps: f64, m2: f64, c: &ScheduleConstants) -> Result<Schedule> {
    c.validate()?;
    let mut notes = Vec::new();
    check_common(l, d, eps, &mut notes)?;
    let df = d as f64;
    let log_m2 = clamped_log_m2(m2, &mut notes);
    let (t_max, delta) = horizon(d, eps, m2, c, l);
    let h_pred = c.c_hpred
        * (eps.sqrt() / (df.powf(1.0 / 3.0) * l.powf(1.5))).min(eps.powf(2.0 / 3.0) / (df.powf(5.0 / 12.0) * l.powf(5.0 / 3.0)))
        / log_m2;
    let h_corr = c.c_hcorr * eps / (df.powf(17.0 / 36.0) * l.powf(1.5) * log_m2);
    let t_corr = c.c_tcorr / (l.sqrt() * df.powf(1.0 / 18.0));

    let t_tail = h_pred.min(t_max).max(delta);
    let mut blocks = Vec::new();
    let mut t = t_max;
    let block_len = 1.0 / l;
    while t > t_tail {
        let t_end = if t - block_len <= t_tail * (1.0 + 1e-12) { t_tail } else { t - block_len };
        let len = t - t_end;
        let n = (len / h_pred).ceil().max(1.0) as usize;
        blocks.push(Block { t_start: t, t_end, steps: vec![len / n as f64; n], windows: vec![] });
        t = t_end;
    }
    let n0 = blocks.len();
    let tail_steps = geometric_tail(t_tail, delta, h_pred);
    if !tail_steps.is_empty() {
        blocks.push(Block { t_start: t_tail, t_end: delta, steps: tail_steps.clone(), windows: vec![] });
    }
    if let Some(last) = blocks.last_mut() {
        last.t_end = delta;
    }

    Ok(Schedule {
        mode: ScheduleMode::Sequential,
        dim: d,
        l,
        eps,
        t_max,
        delta,
        h_pred,
        t_corr,
        h_corr,
        gamma: l.sqrt(),
        n0,
        tail_steps,
        blocks,
        parallel: None,
        beta: None,
        m: None,
        h_rand: None,
        n_rand: None,
        constants: *c,
        notes,
    })
}

/// Parallel predictor-corrector schedule.
///
/// Blocks of length `1/L` tile `[delta, T]`. Inside a block starting at time
/// `t`, windows follow `h = min(1/(4L), t/2, t - delta)`, additionally cut at
/// the block end, with `R = ceil(h beta L sqrt(d) / eps)` midpoints and
/// `K = ceil(log(beta sqrt(d) / eps))` Picard rounds.
pub fn make_parallel_schedule(l: f64, d: usize, eps: f64, m2: f64, beta: f64) -> Result<Schedule> {
    make_parallel_schedule_with(l, d, eps, m2, beta, &ScheduleConstants::default())
}

pub fn make_parallel_schedule_with(l: f64, d: usize, eps: f64, m2: f64, beta: f64, c: &ScheduleConstants) -> Result<Schedule> {
    c.validate()?;
    let mut notes = Vec::new();
    check_common(l, d, eps, &mut notes)?;
    if !(beta >= 1.0) {
        return Err(SamplerError::InvalidParameter(format!("beta must be >= 1, got {beta}")));
    }
    let sd = (d as f64).sqrt();
    let (t_max, delta) = horizon(d, eps, m2, c, l);
    let k_pred = ((c.c_k * (beta * sd / eps).ln()).ceil() as usize).max(1);
    let h_cap = 1.0 / (4.0 * l);

    let mut blocks = Vec::new();
    let mut t = t_max;
    let mut n = 0usize;
    while t > delta {
        let block_start = t_max - n as f64 / l;
        let len = (1.0 / l).min(block_start - delta);
        let block_end = if block_start - len <= delta * (1.0 + 1e-12) { delta } else { block_start - len };
        let mut windows = Vec::new();
        let mut s = t;
        while s > block_end {
            let h = h_cap.min(s / 2.0).min(s - delta).min(s - block_end);
            let end = if s - h - block_end <= 1e-12 * s { block_end } else { s - h };
            let h = s - end;
            let r = ((c.c_r * h * beta * l * sd / eps).ceil() as usize).max(1);
            windows.push(Window { t_start: s, t_end: end, h, r, k: k_pred });
            s = end;
        }
        blocks.push(Block { t_start: t, t_end: block_end, steps: vec![], windows });
        t = block_end;
        n += 1;
    }

    let r_corr = ((c.c_r * beta * sd / eps).ceil() as usize).max(1);
    let k_corr = ((4.0 * (r_corr as f64).ln()).ceil() as usize).max(1);
    let h_corr = c.c_hcorr / (8.0 * l).sqrt();
    let n0 = blocks.len().saturating_sub(1);

    Ok(Schedule {
        mode: ScheduleMode::Parallel,
        dim: d,
        l,
        eps,
        t_max,
        delta,
        h_pred: h_cap,
        t_corr: c.c_tcorr / l.sqrt(),
        h_corr,
        gamma: l.sqrt(),
        n0,
        tail_steps: vec![],
        blocks,
        parallel: Some(ParallelCorrector { h: h_corr, r: r_corr, k: k_corr }),
        beta: Some(beta),
        m: None,
        h_rand: None,
        n_rand: None,
        constants: *c,
        notes,
    })
}

/// Schedule of the log-concave sampler: randomized-midpoint underdamped steps
/// followed by one corrector.
pub fn make_logconcave_schedule(m: f64, l: f64, d: usize, eps: f64) -> Result<Schedule> {
    make_logconcave_schedule_with(m, l, d, eps, &ScheduleConstants::default())
}

pub fn make_logconcave_schedule_with(m: f64, l: f64, d: usize, eps: f64, c: &ScheduleConstants) -> Result<Schedule> {
    c.validate()?;
    if !(m > 0.0 && m <= l && l.is_finite()) {
        return Err(SamplerError::InvalidParameter(format!("need 0 < m <= L, got m = {m}, L = {l}")));
    }
    if d == 0 || !(eps > 0.0 && eps.is_finite()) {
        return Err(SamplerError::InvalidParameter("need d >= 1 and eps > 0".into()));
    }
    let mut notes = Vec::new();
    if eps >= 1.0 {
        notes.push(format!("parameter out of theorem range: eps = {eps} >= 1"));
    }
    let df = d as f64;
    let kappa = l / m;
    let mut lg = (df * kappa / eps).ln();
    if lg < 0.1 {
        notes.push(format!("log(d kappa / eps) = {lg:.4} clamped to 0.1"));
        lg = 0.1;
    }
    let h_rand = c.c_hrand * eps.powf(2.0 / 3.0) / (df.powf(5.0 / 12.0) * kappa.cbrt()) * lg.powf(-1.0 / 3.0);
    let n_rand = ((c.c_nrand * 4.0 * kappa / h_rand * (20.0 * df * kappa / (eps * eps)).ln()).ceil() as usize).max(1);
    let h_corr = c.c_hcorr * eps / (df.powf(17.0 / 36.0) * l.sqrt());
    let t_corr = c.c_tcorr / (l.sqrt() * df.powf(1.0 / 18.0));

    Ok(Schedule {
        mode: ScheduleMode::LogConcave,
        dim: d,
        l,
        eps,
        t_max: 0.0,
        delta: 0.0,
        h_pred: h_rand,
        t_corr,
        h_corr,
        gamma: l.sqrt(),
        n0: 0,
        tail_steps: vec![],
        blocks: vec![],
        parallel: None,
        beta: None,
        m: Some(m),
        h_rand: Some(h_rand),
        n_rand: Some(n_rand),
        constants: *c,
        notes,
    })
}

impl Schedule {
    /// Forward times visited by the predictor, from `T` down to `delta`.
    pub fn grid(&self) -> Vec<f64> {
        let mut g = Vec::new();
        if self.blocks.is_empty() {
            return g;
        }
        g.push(self.blocks[0].t_start);
        for b in &self.blocks {
            match self.mode {
                ScheduleMode::Parallel => g.extend(b.windows.iter().map(|w| w.t_end)),
                _ => {
                    let mut t = b.t_start;
                    for (i, h) in b.steps.iter().enumerate() {
                        t = if i + 1 == b.steps.len() { b.t_end } else { t - h };
                        g.push(t);
                    }
                }
            }
        }
        g
    }

    /// Total number of predictor steps (sequential) or windows (parallel).
    pub fn predictor_steps(&self) -> usize {
        self.blocks.iter().map(|b| b.steps.len() + b.windows.len()).sum()
    }

    /// Number of steps of one sequential corrector invocation.
    pub fn corrector_steps(&self) -> usize {
        corrector_grid(self.t_corr, self.h_corr).len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SamplerError::Config(e.to_string()))
    }
}

/// Step list covering `[0, t_total]`: whole steps of size `h` and one shortened
/// final step when `h` does not divide the duration.
pub fn corrector_grid(t_total: f64, h: f64) -> Vec<f64> {
    if !(t_total > 0.0) || !(h > 0.0) {
        return vec![];
    }
    let ratio = t_total / h;
    let whole = (ratio + 1e-9).floor() as usize;
    let mut steps = vec![h; whole];
    let rest = t_total - whole as f64 * h;
    if rest > 1e-9 * h {
        steps.push(rest);
    }
    steps
}
