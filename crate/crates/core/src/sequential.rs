//! The sequential predictor-corrector sampler.
//!
//! Starting from `N(0, I)` at time `T`, each block of the schedule runs the
//! predictor over its steps and then the underdamped corrector with the score
//! frozen at the block's end time.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::corrector::{fresh_velocities, run_corrector};
use crate::error::{Result, SamplerError};
use crate::parallel::WorkReport;
use crate::predictor::{run_exp_integrator, run_predictor, PredictorState};
use crate::rng::RngStream;
use crate::schedule::{Schedule, ScheduleMode};
use crate::target::ScoreSource;

/// Which ODE discretization the predictor uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictorKind {
    RandomizedMidpoint,
    ExponentialIntegrator,
}

/// Runs every block of a sequential schedule from `x0` at time `T`.
///
/// In the returned report each score evaluation counts as its own round.
pub fn run_sequential<S: ScoreSource + ?Sized>(
    x0: Batch,
    schedule: &Schedule,
    score: &S,
    kind: PredictorKind,
    rng: &RngStream,
) -> Result<(Batch, WorkReport)> {
    if schedule.mode != ScheduleMode::Sequential {
        return Err(SamplerError::InvalidParameter("run_sequential needs a sequential schedule".into()));
    }
    let start = Instant::now();
    let mut state = PredictorState::new(x0, schedule.t_max);
    let mut report = WorkReport::default();
    let corrector_evals = crate::schedule::corrector_grid(schedule.t_corr, schedule.h_corr).len();
    for (b, block) in schedule.blocks.iter().enumerate() {
        state.t = block.t_start;
        state = match kind {
            PredictorKind::RandomizedMidpoint => run_predictor(state, &block.steps, score, &rng.fork_path(&[1, b as u64]))?,
            PredictorKind::ExponentialIntegrator => run_exp_integrator(state, &block.steps, score)?,
        };
        let per_step = if kind == PredictorKind::RandomizedMidpoint { 2 } else { 1 };
        let evals = per_step * block.steps.len();
        report.parallel_rounds += evals;
        report.predictor_rounds += evals;
        report.score_evaluations += evals;

        state.t = block.t_end;
        state.x = run_corrector(
            state.x,
            block.t_end,
            schedule.t_corr,
            schedule.h_corr,
            schedule.gamma,
            score,
            &rng.fork_path(&[2, b as u64]),
        )?;
        report.parallel_rounds += corrector_evals;
        report.corrector_rounds += corrector_evals;
        report.score_evaluations += corrector_evals;
    }
    report.wall_clock = start.elapsed().as_secs_f64();
    Ok((state.x, report))
}

/// Draws `n` starting points from `N(0, I)` and runs [`run_sequential`].
pub fn sample_sequential<S: ScoreSource + ?Sized>(
    n: usize,
    schedule: &Schedule,
    score: &S,
    kind: PredictorKind,
    rng: &RngStream,
) -> Result<(Batch, WorkReport)> {
    let x0 = fresh_velocities(n, score.dim(), 1.0, &rng.fork(0))?;
    run_sequential(x0, schedule, score, kind, rng)
}
