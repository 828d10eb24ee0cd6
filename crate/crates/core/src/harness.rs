//! Configuration, end-to-end commands and reproducible reports.
//!
//! Each command resolves a [`RunConfig`], runs inside its own worker pool and
//! writes its outputs to the configured directory. Every report embeds the
//! resolved configuration, its hash, the seed and the library version.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::Batch;
use crate::error::{Result, SamplerError};
use crate::logconcave::run_logconcave_with_score;
use crate::metrics::{
    check_helper_lemmas, coupled_rms, fit_order, tv_estimate_at, w2_empirical, write_metrics_csv, LemmaCheck, MetricReport, MetricRow,
    OrderFit, CSV_SCHEMA_VERSION, MIN_SAMPLES,
};
use crate::parallel::{collocation_weight, draw_lattice, picard_init, picard_round, sample_parallel, WorkReport};
use crate::pool::WorkerPool;
use crate::predictor::{run_exp_integrator, run_predictor, PredictorState};
use crate::reference::{rk4_flow, rk4_point};
use crate::rng::{uld_noise_covariance, shenlee_noise_covariance, RngStream, ShenLeeNoiseLaw, UldNoiseLaw};
use crate::schedule::{
    make_logconcave_schedule_with, make_parallel_schedule_with, make_sequential_schedule_with, Schedule,
    ScheduleConstants,
};
use crate::sequential::{sample_sequential, PredictorKind};
use crate::target::{CorruptedScore, ScoreSource, TargetKind, TargetModel, TargetSpec};

pub const LIB_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const REPORT_FILE: &str = "report.json";
pub const SAMPLES_FILE: &str = "samples.f64";
pub const METRICS_FILE: &str = "metrics.csv";

/// Exit status for configuration problems.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for numerical failures (blow-ups, degenerate noise laws).
pub const EXIT_NUMERICAL: i32 = 3;
/// Exit status when `verify` finds a failing property.
pub const EXIT_PROPERTY: i32 = 4;

/// Maps an error to the process exit status.
pub fn exit_code(err: &SamplerError) -> i32 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        match err {
            SamplerError::Config(_)
            | SamplerError::InvalidParameter(_)
            | SamplerError::InvalidModel(_)
            | SamplerError::DimensionMismatch { .. }
            | SamplerError::SampleSizeTooSmall { .. } => EXIT_CONFIG,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Seq,
    Parallel,
    Logconcave,
    BaselineExp,
}

/// Predictor-only sweep over step sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceSettings {
    pub h_list: Vec<f64>,
    pub t_from: f64,
    pub t_to: f64,
    pub n: usize,
    /// RK4 reference step, as a fraction of the smallest `h`.
    pub reference_refinement: usize,
}

impl Default for ConvergenceSettings {
    fn default() -> Self {
        Self { h_list: vec![0.1, 0.05, 0.025, 0.0125], t_from: 1.0, t_to: 0.5, n: 100_000, reference_refinement: 8 }
    }
}

/// One predictor window refined by Picard rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PicardSettings {
    pub t_n: f64,
    pub h: f64,
    pub r: usize,
    pub l: f64,
    pub max_rounds: usize,
    pub n: usize,
}

impl Default for PicardSettings {
    fn default() -> Self {
        Self { t_n: 1.0, h: 0.25, r: 32, l: 1.0, max_rounds: 60, n: 2000 }
    }
}

fn default_eps() -> f64 {
    0.3
}
fn default_beta() -> f64 {
    2.0
}
fn default_n() -> usize {
    10_000
}
fn default_algorithm() -> Algorithm {
    Algorithm::Seq
}

/// Everything a command needs. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub target: Option<TargetSpec>,
    /// JSON file holding a [`TargetSpec`]; used when `target` is absent.
    #[serde(default)]
    pub target_path: Option<PathBuf>,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Particles.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub constants: ScheduleConstants,
    /// L2 error of a synthetic score perturbation; exact scores when absent.
    #[serde(default)]
    pub score_error: Option<f64>,
    #[serde(default)]
    pub convergence: ConvergenceSettings,
    #[serde(default)]
    pub picard: PicardSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            target: None,
            target_path: None,
            algorithm: Algorithm::Seq,
            eps: default_eps(),
            beta: default_beta(),
            n: default_n(),
            seed: 0,
            workers: None,
            out: None,
            constants: ScheduleConstants::default(),
            score_error: None,
            convergence: ConvergenceSettings::default(),
            picard: PicardSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SamplerError::Config(format!("cannot parse config: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| SamplerError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        // relative target paths are resolved against the config's directory
        if let (Some(tp), Some(dir)) = (&cfg.target_path, path.parent()) {
            if tp.is_relative() {
                cfg.target_path = Some(dir.join(tp));
            }
        }
        Ok(cfg)
    }

    /// Inlines the target file so the config is self-contained, then checks it.
    pub fn resolved(mut self) -> Result<Self> {
        if self.target.is_none() {
            if let Some(p) = &self.target_path {
                let text = fs::read_to_string(p)
                    .map_err(|e| SamplerError::Config(format!("cannot read target {}: {e}", p.display())))?;
                let spec: TargetSpec = serde_json::from_str(&text)
                    .map_err(|e| SamplerError::Config(format!("cannot parse target {}: {e}", p.display())))?;
                self.target = Some(spec);
            }
        }
        self.target_path = None;
        if !(self.eps > 0.0) || !(self.beta > 0.0) {
            return Err(SamplerError::Config(format!("eps and beta must be positive, got {} and {}", self.eps, self.beta)));
        }
        if self.n < MIN_SAMPLES {
            return Err(SamplerError::Config(format!("batch size {} is below the metric minimum {MIN_SAMPLES}", self.n)));
        }
        Ok(self)
    }

    pub fn target_model(&self) -> Result<TargetModel> {
        let spec = self.target.as_ref().ok_or_else(|| SamplerError::Config("no target given".into()))?;
        TargetModel::from_spec(spec).map_err(|e| SamplerError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON of the run-defining fields. Worker count
    /// and output directory do not affect results and are left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = None;
        c.out = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn schedule(&self, model: &TargetModel) -> Result<Schedule> {
        let (d, l, c) = (model.dim(), model.smoothness(), &self.constants);
        match self.algorithm {
            Algorithm::Seq | Algorithm::BaselineExp => make_sequential_schedule_with(l, d, self.eps, model.m2(), c),
            Algorithm::Parallel => make_parallel_schedule_with(l, d, self.eps, model.m2(), self.beta, c),
            Algorithm::Logconcave => make_logconcave_schedule_with(model.strong_convexity(), l, d, self.eps, c),
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| SamplerError::Io(e.to_string()))?;
    write_file(path, text.as_bytes())
}

fn write_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, rows)?;
    write_file(path, &buf)
}

/// Written as `report.json` by `sample`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub schema_version: u32,
    pub library_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub schedule: Schedule,
    pub work: WorkReport,
    pub metrics: MetricReport,
}

/// Samples, runs metrics against the target and writes
/// `samples.f64`, `report.json` and `metrics.csv`.
pub fn cmd_sample(config: &RunConfig) -> Result<SampleReport> {
    let config = config.clone().resolved()?;
    let pool = WorkerPool::resolve(config.workers)?;
    pool.install(|| run_sample(&config))
}

fn run_sample(config: &RunConfig) -> Result<SampleReport> {
    let model = config.target_model()?;
    let schedule = config.schedule(&model)?;
    let root = RngStream::new(config.seed);
    let sampler_rng = root.fork(0);
    let corrupted = match config.score_error {
        Some(e) => Some(CorruptedScore::new(&model, e, &root.fork(2))?),
        None => None,
    };
    let score: &dyn ScoreSource = match &corrupted {
        Some(c) => c,
        None => &model,
    };
    let (samples, work) = match config.algorithm {
        Algorithm::Seq => sample_sequential(config.n, &schedule, score, PredictorKind::RandomizedMidpoint, &sampler_rng)?,
        Algorithm::BaselineExp => {
            sample_sequential(config.n, &schedule, score, PredictorKind::ExponentialIntegrator, &sampler_rng)?
        }
        Algorithm::Parallel => sample_parallel(config.n, &schedule, score, &sampler_rng)?,
        Algorithm::Logconcave => {
            let start = std::time::Instant::now();
            let out = run_logconcave_with_score(&model, score, &schedule, config.n, &sampler_rng)?;
            let steps = schedule.n_rand.unwrap_or(0);
            let corr = schedule.corrector_steps();
            let work = WorkReport {
                parallel_rounds: 2 * steps + corr,
                score_evaluations: 2 * steps + corr,
                wall_clock: start.elapsed().as_secs_f64(),
                predictor_rounds: 2 * steps,
                corrector_rounds: corr,
            };
            (out.samples, work)
        }
    };
    let metrics = MetricReport::measure(&samples, &model, &root.fork(1))?;
    let hash = config.hash();
    let dir = config.out_dir();
    write_file(&dir.join(SAMPLES_FILE), &samples.to_le_bytes())?;
    write_rows(&dir.join(METRICS_FILE), &metrics.rows(&hash))?;
    let report = SampleReport {
        schema_version: CSV_SCHEMA_VERSION,
        library_version: LIB_VERSION.into(),
        config_hash: hash,
        seed: config.seed,
        config: config.clone(),
        schedule,
        work,
        metrics,
    };
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// One `(algorithm, h)` cell of the convergence sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub algorithm: String,
    pub h: f64,
    /// RMS error against the reference started from the same points (a W2 upper bound).
    pub w2: f64,
    pub w2_stderr: f64,
    /// Sorted-coupling W2 between the output and reference batches.
    pub w2_sorted: f64,
    pub tv: f64,
    pub tv_stderr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub library_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub rows: Vec<ConvergenceRow>,
    pub midpoint_order: OrderFit,
    pub exponential_order: OrderFit,
}

fn default_convergence_target() -> TargetSpec {
    TargetSpec {
        kind: TargetKind::IsotropicGaussian,
        dim: 1,
        means: vec![vec![0.0]],
        covs: vec![vec![vec![4.0]]],
        weights: vec![],
        m: None,
        l: None,
    }
}

fn uniform_steps(t_from: f64, t_to: f64, h: f64) -> Vec<f64> {
    let m = ((t_from - t_to) / h).round().max(1.0) as usize;
    vec![(t_from - t_to) / m as f64; m]
}

/// Runs both predictors from exact samples of `q_{t_from}` to `t_to` for every
/// `h`, measures the error against an RK4 solution from the same starting
/// points and TV against the exact `q_{t_to}`, and fits the orders on the
/// coupled error. Writes
/// `convergence.csv`, `metrics.csv` and `report.json`.
pub fn cmd_convergence_study(config: &RunConfig) -> Result<ConvergenceReport> {
    let mut config = config.clone();
    if config.target.is_none() && config.target_path.is_none() {
        config.target = Some(default_convergence_target());
    }
    let config = config.resolved()?;
    let pool = WorkerPool::resolve(config.workers)?;
    pool.install(|| run_convergence(&config))
}

fn run_convergence(config: &RunConfig) -> Result<ConvergenceReport> {
    let s = &config.convergence;
    if s.h_list.len() < 2 || !(s.t_from > s.t_to && s.t_to >= 0.0) {
        return Err(SamplerError::Config("convergence study needs two or more h and t_from > t_to >= 0".into()));
    }
    let model = config.target_model()?;
    let root = RngStream::new(config.seed);
    let x0 = model.sample_exact(s.t_from, s.n, &root.fork(0))?;
    let h_min = s.h_list.iter().cloned().fold(f64::INFINITY, f64::min);
    let reference = rk4_flow(&model, &x0, s.t_from, s.t_to, h_min / s.reference_refinement.max(1) as f64)?;
    let mut rows = Vec::new();
    for (i, &h) in s.h_list.iter().enumerate() {
        let steps = uniform_steps(s.t_from, s.t_to, h);
        let mid = run_predictor(PredictorState::new(x0.clone(), s.t_from), &steps, &model, &root.fork_path(&[1, i as u64]))?.x;
        let exp = run_exp_integrator(PredictorState::new(x0.clone(), s.t_from), &steps, &model)?.x;
        for (name, out) in [("midpoint", &mid), ("exponential", &exp)] {
            let w = coupled_rms(out, &reference)?;
            let sorted = w2_empirical(out, &reference, &root.fork(2))?;
            let tv = tv_estimate_at(out, &model, s.t_to, &root.fork(3))?;
            rows.push(ConvergenceRow {
                algorithm: name.into(),
                h,
                w2: w.value,
                w2_stderr: w.stderr,
                w2_sorted: sorted.value,
                tv: tv.value,
                tv_stderr: tv.stderr,
                n: s.n,
            });
        }
    }
    let fit = |name: &str| -> Result<OrderFit> {
        let (h, e): (Vec<f64>, Vec<f64>) =
            rows.iter().filter(|r| r.algorithm == name).map(|r| (r.h, r.w2.max(f64::MIN_POSITIVE))).unzip();
        fit_order(&h, &e)
    };
    let midpoint_order = fit("midpoint")?;
    let exponential_order = fit("exponential")?;
    let hash = config.hash();
    let dir = config.out_dir();
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| SamplerError::Io(e.to_string()))?;
    }
    write_file(&dir.join("convergence.csv"), &w.into_inner().map_err(|e| SamplerError::Io(e.to_string()))?)?;
    let metrics = MetricReport {
        n: s.n,
        w2: None,
        tv: None,
        orders: vec![("midpoint".into(), midpoint_order.clone()), ("exponential".into(), exponential_order.clone())],
    };
    write_rows(&dir.join(METRICS_FILE), &metrics.rows(&hash))?;
    let report = ConvergenceReport {
        library_version: LIB_VERSION.into(),
        config_hash: hash,
        seed: config.seed,
        config: config.clone(),
        rows,
        midpoint_order,
        exponential_order,
    };
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Errors after one Picard round: against the exact flow and against the fixed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardRow {
    pub round: usize,
    pub mse_exact: f64,
    pub mse_fixed_point: f64,
    /// `mse_exact[k] / mse_exact[k-1]`; NaN for round 0.
    pub ratio: f64,
    /// Allowed ratio: `(√c + (1 + √c) √(floor / mse_exact[k-1]))²` with `c = 8h²L²`.
    pub ratio_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardReport {
    pub library_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub rows: Vec<PicardRow>,
    /// Mean-square error of the fixed point against the exact flow.
    pub floor: f64,
    /// `8 h² L²`.
    pub contraction_bound: f64,
    /// `exp` of the fitted slope of `ln mse_fixed_point` against the round.
    pub fitted_factor: f64,
    /// `ceil(4 ln R)`.
    pub k_star: usize,
    pub ratios_within_bound: bool,
    pub floor_reached_at_k_star: bool,
}

fn default_picard_target() -> TargetSpec {
    TargetSpec {
        kind: TargetKind::IsotropicGaussian,
        dim: 2,
        means: vec![vec![0.0, 0.0]],
        covs: vec![vec![vec![4.0, 0.0], vec![0.0, 4.0]]],
        weights: vec![],
        m: None,
        l: None,
    }
}

/// Refines one window starting at exact samples of `q_{t_n}` and records the
/// error of every round. Writes `picard.csv`, `metrics.csv` and `report.json`.
pub fn cmd_picard_study(config: &RunConfig) -> Result<PicardReport> {
    let mut config = config.clone();
    if config.target.is_none() && config.target_path.is_none() {
        config.target = Some(default_picard_target());
    }
    let config = config.resolved()?;
    let pool = WorkerPool::resolve(config.workers)?;
    pool.install(|| run_picard(&config))
}

/// Exact flow values at every lattice node, by RK4 between consecutive nodes.
fn exact_nodes(model: &TargetModel, x_n: &Batch, t_n: f64, h: f64, r: usize, alphas: &[f64]) -> Vec<f64> {
    let d = x_n.dim();
    let mut out = vec![0.0; x_n.len() * r * d];
    for p in 0..x_n.len() {
        let mut x = x_n.row(p).to_vec();
        let mut t = t_n;
        for i in 0..r {
            let t_i = t_n - alphas[p * r + i] * h;
            if t > t_i {
                let n_steps = ((t - t_i) / (h / (8.0 * r as f64))).ceil().max(1.0) as usize;
                rk4_point(model, &mut x, t, t_i, n_steps);
            }
            t = t_i;
            out[(p * r + i) * d..(p * r + i + 1) * d].copy_from_slice(&x);
        }
    }
    out
}

fn mse(a: &[f64], b: &[f64], count: usize) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / count as f64
}

fn run_picard(config: &RunConfig) -> Result<PicardReport> {
    let s = &config.picard;
    if !(s.h > 0.0 && s.t_n > s.h && s.l > 0.0) || s.r == 0 || s.max_rounds == 0 {
        return Err(SamplerError::Config("picard study needs 0 < h < t_n, L > 0, R >= 1 and max_rounds >= 1".into()));
    }
    if s.n < MIN_SAMPLES {
        return Err(SamplerError::Config(format!("picard study needs at least {MIN_SAMPLES} particles")));
    }
    let model = config.target_model()?;
    let root = RngStream::new(config.seed);
    let x_n = model.sample_exact(s.t_n, s.n, &root.fork(0))?;
    let mut lat_rng = root.fork(1);
    let alphas: Vec<f64> = (0..s.n).flat_map(|_| draw_lattice(&mut lat_rng, s.r)).collect();
    let exact = exact_nodes(&model, &x_n, s.t_n, s.h, s.r, &alphas);
    let mut iterates = vec![picard_init(&x_n, s.t_n, s.h, s.r, alphas, &model)?];
    for _ in 0..s.max_rounds {
        let next = picard_round(iterates.last().expect("nonempty"), &x_n, s.t_n, s.h, &model)?;
        iterates.push(next);
    }
    let fixed = &iterates.last().expect("nonempty").estimates;
    let count = s.n * s.r;
    let floor = mse(fixed, &exact, count);
    let c = 8.0 * s.h * s.h * s.l * s.l;
    let mut rows: Vec<PicardRow> = Vec::new();
    for (k, lat) in iterates.iter().enumerate() {
        let e = mse(&lat.estimates, &exact, count);
        let (ratio, ratio_bound) = match rows.last() {
            Some(prev) => (
                e / prev.mse_exact,
                (c.sqrt() + (1.0 + c.sqrt()) * (floor / prev.mse_exact).sqrt()).powi(2),
            ),
            None => (f64::NAN, f64::NAN),
        };
        rows.push(PicardRow { round: k, mse_exact: e, mse_fixed_point: mse(&lat.estimates, fixed, count), ratio, ratio_bound });
    }
    // ratios are checked while the error is still above twice the floor
    let ratios_within_bound =
        rows.windows(2).filter(|w| w[0].mse_exact > 2.0 * floor).all(|w| w[1].ratio <= w[1].ratio_bound);
    let scale = rows[0].mse_fixed_point.max(f64::MIN_POSITIVE);
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .take(s.max_rounds)
        .take_while(|r| r.mse_fixed_point > 1e-24 * scale)
        .map(|r| (r.round as f64, r.mse_fixed_point.ln()))
        .collect();
    let fitted_factor = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        (sxy / sxx).exp()
    } else {
        0.0
    };
    let k_star = (4.0 * (s.r as f64).ln()).ceil().max(1.0) as usize;
    let floor_reached_at_k_star = rows.get(k_star).map(|r| r.mse_exact <= 2.0 * floor).unwrap_or(false);
    let hash = config.hash();
    let dir = config.out_dir();
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| SamplerError::Io(e.to_string()))?;
    }
    write_file(&dir.join("picard.csv"), &w.into_inner().map_err(|e| SamplerError::Io(e.to_string()))?)?;
    let metric = |name: &str, value: f64| MetricRow {
        metric: name.into(),
        value,
        stderr: f64::NAN,
        n: s.n,
        config_hash: hash.clone(),
    };
    write_rows(
        &dir.join(METRICS_FILE),
        &[metric("picard_floor", floor), metric("picard_fitted_factor", fitted_factor), metric("picard_bound", c)],
    )?;
    let report = PicardReport {
        library_version: LIB_VERSION.into(),
        config_hash: hash,
        seed: config.seed,
        config: config.clone(),
        rows,
        floor,
        contraction_bound: c,
        fitted_factor,
        k_star,
        ratios_within_bound,
        floor_reached_at_k_star,
    };
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// One property checked by `verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub name: String,
    pub pass: bool,
    /// Failing informational checks do not fail the command.
    pub gating: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub library_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub checks: Vec<PropertyCheck>,
    pub lemmas: Vec<LemmaCheck>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass || !c.gating)
    }
}

const VERIFY_DRAWS: usize = 200_000;

fn check(name: &str, pass: bool, detail: String) -> PropertyCheck {
    PropertyCheck { name: name.into(), pass, gating: true, detail }
}

/// Largest entry-wise deviation in standard errors between an empirical
/// second-moment matrix of zero-mean draws and `cov`.
fn covariance_z_score(draws: &[Vec<f64>], cov: &[Vec<f64>]) -> f64 {
    let k = cov.len();
    let n = draws.len() as f64;
    let mut worst: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let vals: Vec<f64> = draws.iter().map(|w| w[i] * w[j]).collect();
            let m = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt().max(1e-300);
            worst = worst.max((m - cov[i][j]).abs() / se);
        }
    }
    worst
}

fn verify_uld_noise(rng: &RngStream) -> Result<Vec<PropertyCheck>> {
    let mut out = Vec::new();
    for (i, (delta, gamma)) in [(0.05, 1.0), (0.2, 2.0), (1.0, 0.5)].into_iter().enumerate() {
        let law = UldNoiseLaw::new(delta, gamma)?;
        let mut r = rng.fork(i as u64);
        let (mut zx, mut zv) = ([0.0], [0.0]);
        let draws: Vec<Vec<f64>> = (0..VERIFY_DRAWS)
            .map(|_| {
                law.sample_into(&mut r, &mut zx, &mut zv);
                vec![zx[0], zv[0]]
            })
            .collect();
        let (vx, cxv, vv) = uld_noise_covariance(delta, gamma);
        let z = covariance_z_score(&draws, &[vec![vx, cxv], vec![cxv, vv]]);
        out.push(check(&format!("uld_noise_cov(delta={delta}, gamma={gamma})"), z < 5.0, format!("max |z| = {z:.2}")));
    }
    Ok(out)
}

fn verify_shenlee_noise(rng: &RngStream) -> Result<Vec<PropertyCheck>> {
    let mut out = Vec::new();
    for (i, (alpha, h, u)) in [(0.3, 0.1, 1.0), (0.7, 0.5, 0.25), (0.5, 1.0, 2.0)].into_iter().enumerate() {
        let law = ShenLeeNoiseLaw::new(alpha, h, u)?;
        let mut r = rng.fork(i as u64);
        let (mut a, mut b, mut c) = ([0.0], [0.0], [0.0]);
        let draws: Vec<Vec<f64>> = (0..VERIFY_DRAWS)
            .map(|_| {
                law.sample_into(&mut r, &mut a, &mut b, &mut c);
                vec![a[0], b[0], c[0]]
            })
            .collect();
        let cov = shenlee_noise_covariance(alpha, h, u);
        let cov: Vec<Vec<f64>> = cov.iter().map(|row| row.to_vec()).collect();
        let z = covariance_z_score(&draws, &cov);
        out.push(check(&format!("shenlee_noise_cov(alpha={alpha}, h={h}, u={u})"), z < 5.0, format!("max |z| = {z:.2}")));
    }
    Ok(out)
}

fn verify_unbiasedness(rng: &RngStream) -> Vec<PropertyCheck> {
    [0.05, 0.2]
        .into_iter()
        .enumerate()
        .map(|(i, h)| {
            let mut r = rng.fork(i as u64);
            let vals: Vec<f64> = (0..VERIFY_DRAWS).map(|_| h * ((1.0 - r.uniform()) * h).exp()).collect();
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let se = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
            let exact = h.exp_m1();
            check(
                &format!("midpoint_unbiased(h={h})"),
                (m - exact).abs() <= 4.0 * se,
                format!("mean {m:.8} vs {exact:.8}, se {se:.2e}"),
            )
        })
        .collect()
}

fn verify_telescoping(rng: &RngStream) -> Vec<PropertyCheck> {
    let mut r = rng.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let rr = 1 + (r.next_u64() % 16) as usize;
        let h = 0.05 + r.uniform();
        let alphas = draw_lattice(&mut r, rr);
        let delta = h / rr as f64;
        for (i0, &a) in alphas.iter().enumerate() {
            let sum: f64 = (1..=i0 + 1).map(|j| collocation_weight(i0 + 1, j, h, delta, a)).sum();
            worst = worst.max((sum - (a * h).exp_m1()).abs());
        }
    }
    vec![check("collocation_weights_telescope", worst < 1e-12, format!("max deviation {worst:.2e}"))]
}

fn default_verify_targets() -> Result<Vec<TargetModel>> {
    Ok(vec![
        TargetModel::standard_normal(2)?,
        TargetModel::isotropic_gaussian(vec![0.0], 4.0)?,
        TargetModel::anisotropic_gaussian(vec![0.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 0.25]])?,
        TargetModel::gaussian_mixture(
            vec![0.5, 0.5],
            vec![vec![2.0, 0.0], vec![-2.0, 0.0]],
            vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]; 2],
        )?,
    ])
}

/// Runs the property suite and writes `verify.json`. The configured target is
/// checked when given, otherwise a default set of targets.
pub fn cmd_verify(config: &RunConfig) -> Result<VerifyReport> {
    let config = config.clone().resolved()?;
    let pool = WorkerPool::resolve(config.workers)?;
    pool.install(|| run_verify(&config))
}

fn run_verify(config: &RunConfig) -> Result<VerifyReport> {
    let root = RngStream::new(config.seed);
    let mut checks = Vec::new();
    checks.extend(verify_uld_noise(&root.fork(0))?);
    checks.extend(verify_shenlee_noise(&root.fork(1))?);
    checks.extend(verify_unbiasedness(&root.fork(2)));
    checks.extend(verify_telescoping(&root.fork(3)));
    let targets = match &config.target {
        Some(_) => vec![config.target_model()?],
        None => default_verify_targets()?,
    };
    let mut lemmas = Vec::new();
    for (i, model) in targets.iter().enumerate() {
        let rows = check_helper_lemmas(model, &[0.01, 0.1, 1.0], config.n, &root.fork_path(&[4, i as u64]))?;
        for row in &rows {
            let name = format!("{}[{}](t={})", row.lemma, model.kind(), row.t);
            let detail = format!("value {:.4e} vs bound {:.4e}", row.value, row.bound);
            let mut c = check(&name, row.pass, detail);
            // the decay rate is an empirical diagnostic, not a bound
            c.gating = row.lemma != "ou_tv_slope";
            checks.push(c);
        }
        lemmas.extend(rows);
    }
    let report = VerifyReport {
        library_version: LIB_VERSION.into(),
        config_hash: config.hash(),
        seed: config.seed,
        checks,
        lemmas,
    };
    write_json(&config.out_dir().join("verify.json"), &report)?;
    Ok(report)
}
