//! Distances between sample batches and analytic targets, order fits and
//! Monte Carlo checks of the score-norm and OU-mixing bounds.
//!
//! TV estimates are lower bounds: the largest TV over random 1-D projections
//! between a kernel density estimate and the exact projected law, both viewed
//! through the same Gaussian kernel.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::error::{Result, SamplerError};
use crate::rng::RngStream;
use crate::target::{normal_cdf, Mixture1d, TargetModel};

pub const MIN_SAMPLES: usize = 100;
pub const SLICED_DIRECTIONS: usize = 128;
pub const TV_PROJECTIONS: usize = 64;
pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const CSV_COLUMNS: [&str; 5] = ["metric", "value", "stderr", "n", "config-hash"];

const QUANTILE_GRID: usize = 4096;
const BOOTSTRAP_RESAMPLES: usize = 2000;
const BOOTSTRAP_SEED: u64 = 0x6f72_6465_72;
const TV_SUBSETS: usize = 4;
const GAUSSIAN_TV_DRAWS: usize = 1 << 16;

fn check_n(n: usize) -> Result<()> {
    if n < MIN_SAMPLES {
        return Err(SamplerError::SampleSizeTooSmall { n, min: MIN_SAMPLES });
    }
    Ok(())
}

/// A Wasserstein-2 estimate. `method` is `quantile` (1-D) or `sliced`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct W2Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
    pub method: String,
    /// Closed-form W2 between moment-matched Gaussians, when the reference is Gaussian.
    pub gaussian: Option<f64>,
}

/// A projection lower bound on TV, plus a fitted-moment Gaussian diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
    pub direction: Vec<f64>,
    pub gaussian_fit: Option<f64>,
}

/// Least-squares slope of `ln err` against `ln h` with a bootstrap 95% interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl OrderFit {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.ci_high - self.ci_low)
    }
}

/// Unit vectors: the single axis in 1-D, otherwise uniform on the sphere.
pub fn random_directions(d: usize, k: usize, rng: &RngStream) -> Vec<Vec<f64>> {
    if d == 1 {
        return vec![vec![1.0]];
    }
    let mut r = rng.clone();
    (0..k)
        .map(|_| loop {
            let mut u = vec![0.0; d];
            r.fill_normal(&mut u);
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                u.iter_mut().for_each(|x| *x /= norm);
                break u;
            }
        })
        .collect()
}

pub fn project(batch: &Batch, u: &[f64]) -> Vec<f64> {
    batch.rows().map(|r| r.iter().zip(u).map(|(a, b)| a * b).sum()).collect()
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// `(W2², stderr of W2²)` between two sorted samples. Both empirical quantile
/// functions are step functions; the integral runs over their merged breakpoints.
fn w2_sq_sorted(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut p = 0.0;
    let (mut s1, mut s2) = (0.0, 0.0);
    while i < na && j < nb {
        let pa = (i + 1) as f64 / na as f64;
        let pb = (j + 1) as f64 / nb as f64;
        let next = pa.min(pb);
        let c = (a[i] - b[j]).powi(2);
        let w = next - p;
        s1 += w * c;
        s2 += w * c * c;
        p = next;
        if pa <= next {
            i += 1;
        }
        if pb <= next {
            j += 1;
        }
    }
    let var = (s2 - s1 * s1).max(0.0);
    (s1, (var / na.min(nb) as f64).sqrt())
}

fn w2_from_sq(sq: f64, se_sq: f64) -> (f64, f64) {
    let w = sq.max(0.0).sqrt();
    let se = if w > 0.0 { se_sq / (2.0 * w) } else { se_sq.sqrt() };
    (w, se)
}

/// Quantile function of a 1-D law, tabulated on a uniform grid of levels and
/// evaluated exactly outside it.
struct QuantileTable<'a> {
    law: &'a Mixture1d,
    values: Vec<f64>,
}

impl<'a> QuantileTable<'a> {
    fn new(law: &'a Mixture1d) -> Self {
        let values = (1..QUANTILE_GRID).map(|k| law.quantile(k as f64 / QUANTILE_GRID as f64)).collect();
        Self { law, values }
    }

    fn eval(&self, p: f64) -> f64 {
        let g = QUANTILE_GRID as f64;
        let pos = p * g;
        if pos <= 1.0 || pos >= g - 1.0 {
            return self.law.quantile(p);
        }
        let k = pos.floor() as usize;
        let f = pos - k as f64;
        let lo = self.values[k - 1];
        let hi = self.values[(k).min(QUANTILE_GRID - 2)];
        lo + f * (hi - lo)
    }
}

/// `(W2², stderr)` between a sorted sample and a 1-D law via the quantile coupling.
fn w2_sq_to_law(sorted_x: &[f64], law: &Mixture1d) -> (f64, f64) {
    let n = sorted_x.len();
    let table = QuantileTable::new(law);
    let (mut s1, mut s2) = (0.0, 0.0);
    for (i, x) in sorted_x.iter().enumerate() {
        let q = table.eval((i as f64 + 0.5) / n as f64);
        let c = (x - q).powi(2);
        s1 += c;
        s2 += c * c;
    }
    s1 /= n as f64;
    s2 /= n as f64;
    (s1, ((s2 - s1 * s1).max(0.0) / n as f64).sqrt())
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// W2 between two batches: exact sorted coupling in 1-D, sliced W2 over
/// [`SLICED_DIRECTIONS`] random directions otherwise.
pub fn w2_empirical(a: &Batch, b: &Batch, rng: &RngStream) -> Result<W2Estimate> {
    if a.dim() != b.dim() {
        return Err(SamplerError::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    check_n(a.len().min(b.len()))?;
    let d = a.dim();
    if d == 1 {
        let (sq, se) = w2_sq_sorted(&sorted(a.as_slice().to_vec()), &sorted(b.as_slice().to_vec()));
        let (value, stderr) = w2_from_sq(sq, se);
        return Ok(W2Estimate { value, stderr, n: a.len().min(b.len()), method: "quantile".into(), gaussian: None });
    }
    let per_dir: Vec<f64> = random_directions(d, SLICED_DIRECTIONS, rng)
        .par_iter()
        .map(|u| w2_sq_sorted(&sorted(project(a, u)), &sorted(project(b, u))).0)
        .collect();
    let (sq, se) = mean_and_se(&per_dir);
    let (value, stderr) = w2_from_sq(sq, se);
    Ok(W2Estimate { value, stderr, n: a.len().min(b.len()), method: "sliced".into(), gaussian: None })
}

/// RMS distance between row `i` of `a` and row `i` of `b`. Pairing rows is a
/// coupling, so this bounds W2 from above; it is the natural error of a
/// discretization started from the same points as its reference.
pub fn coupled_rms(a: &Batch, b: &Batch) -> Result<W2Estimate> {
    if a.dim() != b.dim() || a.len() != b.len() {
        return Err(SamplerError::DimensionMismatch { expected: a.as_slice().len(), got: b.as_slice().len() });
    }
    check_n(a.len())?;
    let sq: Vec<f64> =
        a.rows().zip(b.rows()).map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum()).collect();
    let (m, se) = mean_and_se(&sq);
    let (value, stderr) = w2_from_sq(m, se);
    Ok(W2Estimate { value, stderr, n: a.len(), method: "coupled".into(), gaussian: None })
}

/// W2 between a batch and the data law `q_0` of `target`. Gaussian targets also
/// get the closed-form distance between the fitted and exact moments.
pub fn w2_to_target(batch: &Batch, target: &TargetModel, rng: &RngStream) -> Result<W2Estimate> {
    if batch.dim() != target.dim() {
        return Err(SamplerError::DimensionMismatch { expected: target.dim(), got: batch.dim() });
    }
    check_n(batch.len())?;
    let d = batch.dim();
    let (sq, se) = if d == 1 {
        w2_sq_to_law(&sorted(batch.as_slice().to_vec()), &target.project(0.0, &[1.0]))
    } else {
        let per_dir: Vec<f64> = random_directions(d, SLICED_DIRECTIONS, rng)
            .par_iter()
            .map(|u| w2_sq_to_law(&sorted(project(batch, u)), &target.project(0.0, u)).0)
            .collect();
        mean_and_se(&per_dir)
    };
    let (value, stderr) = w2_from_sq(sq, se);
    let gaussian = if target.is_gaussian() {
        let (m, c) = target.moments(0.0);
        Some(gaussian_w2(&batch.mean(), &batch.covariance(), &m, &c)?)
    } else {
        None
    };
    let method = if d == 1 { "quantile" } else { "sliced" };
    Ok(W2Estimate { value, stderr, n: batch.len(), method: method.into(), gaussian })
}

fn sym_matrix(c: &[f64], d: usize) -> Result<DMatrix<f64>> {
    if c.len() != d * d {
        return Err(SamplerError::DimensionMismatch { expected: d * d, got: c.len() });
    }
    let m = DMatrix::from_row_slice(d, d, c);
    Ok((&m + m.transpose()) * 0.5)
}

fn sqrtm_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// Closed-form W2 between `N(m1, c1)` and `N(m2, c2)` (row-major covariances).
pub fn gaussian_w2(m1: &[f64], c1: &[f64], m2: &[f64], c2: &[f64]) -> Result<f64> {
    let d = m1.len();
    if m2.len() != d {
        return Err(SamplerError::DimensionMismatch { expected: d, got: m2.len() });
    }
    let a = sym_matrix(c1, d)?;
    let b = sym_matrix(c2, d)?;
    let rb = sqrtm_psd(b.clone());
    let cross = sqrtm_psd(&rb * &a * &rb);
    let shift: f64 = m1.iter().zip(m2).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((shift + a.trace() + b.trace() - 2.0 * cross.trace()).max(0.0).sqrt())
}

/// Silverman's rule of thumb.
pub fn silverman_bandwidth(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (m, _) = mean_and_se(x);
    let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let s = sorted(x.to_vec());
    let q = |p: f64| s[((p * (s.len() - 1) as f64).round() as usize).min(s.len() - 1)];
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let bw = 0.9 * spread * n.powf(-0.2);
    if bw > 0.0 {
        bw
    } else {
        1e-6
    }
}

/// TV between the Gaussian KDE of `x` and `law` smoothed by the same kernel.
/// Smoothing both sides can only shrink TV, so the result stays a lower bound
/// on the projected TV up to Monte Carlo error.
pub fn tv_projection(x: &[f64], law: &Mixture1d) -> f64 {
    let n = x.len();
    let bw = silverman_bandwidth(x);
    let (smin, smax) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (llo, lhi) = law.support(8.0);
    let lo = smin.min(llo) - 5.0 * bw;
    let hi = smax.max(lhi) + 5.0 * bw;
    let cells = (((hi - lo) / (0.25 * bw)).ceil() as usize).clamp(512, 1 << 17);
    let w = (hi - lo) / cells as f64;
    let mut counts = vec![0.0; cells + 1];
    for &v in x {
        let pos = (v - lo) / w;
        let k = (pos.floor() as usize).min(cells - 1);
        let f = pos - k as f64;
        counts[k] += 1.0 - f;
        counts[k + 1] += f;
    }
    let half = (5.0 * bw / w).ceil() as usize;
    let kernel: Vec<f64> = (0..=half)
        .map(|j| {
            let z = j as f64 * w / bw;
            (-0.5 * z * z).exp() / (bw * (2.0 * std::f64::consts::PI).sqrt())
        })
        .collect();
    let smooth = law.smoothed(bw * bw);
    let mut tv = 0.0;
    for k in 0..=cells {
        let mut dens = 0.0;
        let a = k.saturating_sub(half);
        let b = (k + half).min(cells);
        for (j, c) in counts[a..=b].iter().enumerate() {
            if *c != 0.0 {
                dens += c * kernel[(a + j).abs_diff(k)];
            }
        }
        dens /= n as f64;
        let trap = if k == 0 || k == cells { 0.5 } else { 1.0 };
        tv += trap * w * (dens - smooth.pdf(lo + k as f64 * w)).abs();
    }
    (0.5 * tv).clamp(0.0, 1.0)
}

/// Exact TV between two 1-D Gaussians.
pub fn gaussian_tv_1d(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    let (s1, s2) = (v1.sqrt(), v2.sqrt());
    // the densities cross where a x^2 + b x + c = 0
    let a = 1.0 / v2 - 1.0 / v1;
    let b = 2.0 * (m1 / v1 - m2 / v2);
    let c = m2 * m2 / v2 - m1 * m1 / v1 + (v2 / v1).ln();
    let mass = |lo: f64, hi: f64| {
        let p = normal_cdf((hi - m1) / s1) - normal_cdf((lo - m1) / s1);
        let q = normal_cdf((hi - m2) / s2) - normal_cdf((lo - m2) / s2);
        (p - q).abs()
    };
    if a.abs() < 1e-14 * (1.0 / v1 + 1.0 / v2) {
        if b.abs() < 1e-300 {
            return 0.0;
        }
        let r = -c / b;
        return mass(f64::NEG_INFINITY, r);
    }
    let disc = b * b - 4.0 * a * c;
    if disc <= 0.0 {
        return 0.0;
    }
    let sq = disc.sqrt();
    let (r1, r2) = ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a));
    let (r1, r2) = (r1.min(r2), r1.max(r2));
    mass(r1, r2).clamp(0.0, 1.0)
}

fn cholesky_lower(c: &[f64], d: usize) -> Result<DMatrix<f64>> {
    sym_matrix(c, d)?
        .cholesky()
        .map(|ch| ch.l())
        .ok_or_else(|| SamplerError::InvalidState("covariance is not positive definite".into()))
}

fn gaussian_log_pdf(x: &[f64], mean: &[f64], l: &DMatrix<f64>, log_det: f64) -> f64 {
    let d = x.len();
    let diff = nalgebra::DVector::from_iterator(d, x.iter().zip(mean).map(|(a, b)| a - b));
    let z = l.solve_lower_triangular(&diff).unwrap_or(diff);
    -0.5 * (z.norm_squared() + log_det + d as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// TV between `N(m1, c1)` and `N(m2, c2)`: exact in 1-D, Monte Carlo
/// `E_1[(1 - p2/p1)_+]` otherwise.
pub fn gaussian_tv(m1: &[f64], c1: &[f64], m2: &[f64], c2: &[f64], rng: &RngStream) -> Result<f64> {
    let d = m1.len();
    if d == 1 {
        return Ok(gaussian_tv_1d(m1[0], c1[0], m2[0], c2[0]));
    }
    let l1 = cholesky_lower(c1, d)?;
    let l2 = cholesky_lower(c2, d)?;
    let ld1 = 2.0 * l1.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ld2 = 2.0 * l2.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mut r = rng.clone();
    let mut g = vec![0.0; d];
    let mut acc = 0.0;
    for _ in 0..GAUSSIAN_TV_DRAWS {
        r.fill_normal(&mut g);
        let x: Vec<f64> = (0..d).map(|i| m1[i] + (0..=i).map(|j| l1[(i, j)] * g[j]).sum::<f64>()).collect();
        let lr = gaussian_log_pdf(&x, m2, &l2, ld2) - gaussian_log_pdf(&x, m1, &l1, ld1);
        acc += (1.0 - lr.exp()).max(0.0);
    }
    Ok((acc / GAUSSIAN_TV_DRAWS as f64).clamp(0.0, 1.0))
}

/// Projection lower bound on `TV(batch, q_0)` over [`TV_PROJECTIONS`] random
/// directions. The stderr is the spread of the same statistic on four disjoint
/// subsets along the maximizing direction.
pub fn tv_estimate(batch: &Batch, target: &TargetModel, rng: &RngStream) -> Result<TvEstimate> {
    tv_estimate_at(batch, target, 0.0, rng)
}

/// As [`tv_estimate`], against the noised marginal `q_t`.
pub fn tv_estimate_at(batch: &Batch, target: &TargetModel, t: f64, rng: &RngStream) -> Result<TvEstimate> {
    if batch.dim() != target.dim() {
        return Err(SamplerError::DimensionMismatch { expected: target.dim(), got: batch.dim() });
    }
    let n = batch.len();
    check_n(n)?;
    let d = batch.dim();
    let dirs = random_directions(d, TV_PROJECTIONS, &rng.fork(0));
    let tvs: Vec<f64> = dirs.par_iter().map(|u| tv_projection(&project(batch, u), &target.project(t, u))).collect();
    let mut best = (-1.0, 0);
    for (k, &tv) in tvs.iter().enumerate() {
        if tv > best.0 {
            best = (tv, k);
        }
    }
    let u = &dirs[best.1];
    let x = project(batch, u);
    let law = target.project(t, u);
    let stderr = if n >= TV_SUBSETS * MIN_SAMPLES {
        let m = n / TV_SUBSETS;
        let subs: Vec<f64> = (0..TV_SUBSETS).map(|s| tv_projection(&x[s * m..(s + 1) * m], &law)).collect();
        let (_, se) = mean_and_se(&subs);
        se
    } else {
        f64::NAN
    };
    let gaussian_fit = if target.is_gaussian() {
        let (m, c) = target.moments(t);
        gaussian_tv(&batch.mean(), &batch.covariance(), &m, &c, &rng.fork(1)).ok()
    } else {
        None
    };
    Ok(TvEstimate { value: best.0.clamp(0.0, 1.0), stderr, n, direction: u.clone(), gaussian_fit })
}

fn ols(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 1e-300 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Fits `err ≈ C h^p` and returns `p` with a pairs-bootstrap 95% interval.
pub fn fit_order(h: &[f64], err: &[f64]) -> Result<OrderFit> {
    if h.len() != err.len() || h.len() < 2 {
        return Err(SamplerError::InvalidParameter("fit_order needs at least two (h, err) pairs".into()));
    }
    if h.iter().chain(err).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(SamplerError::InvalidParameter("fit_order needs positive finite h and err".into()));
    }
    let lx: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    let (slope, intercept) =
        ols(&lx, &ly).ok_or_else(|| SamplerError::InvalidParameter("fit_order needs distinct h values".into()))?;
    let mut rng = RngStream::new(BOOTSTRAP_SEED);
    let k = lx.len();
    let mut slopes = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let (mut bx, mut by) = (vec![0.0; k], vec![0.0; k]);
    while slopes.len() < BOOTSTRAP_RESAMPLES {
        for i in 0..k {
            let j = (rng.next_u64() % k as u64) as usize;
            bx[i] = lx[j];
            by[i] = ly[j];
        }
        if let Some((s, _)) = ols(&bx, &by) {
            slopes.push(s);
        }
    }
    slopes.sort_by(f64::total_cmp);
    let at = |p: f64| slopes[((p * (slopes.len() - 1) as f64).round()) as usize];
    Ok(OrderFit { slope, intercept, ci_low: at(0.025).min(slope), ci_high: at(0.975).max(slope) })
}

/// One row of the helper-bound table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub lemma: String,
    pub t: f64,
    pub value: f64,
    pub stderr: f64,
    pub bound: f64,
    pub pass: bool,
}

/// `d / (1 - e^{-2t})`, the explicit constant behind `E‖∇ln q_t‖² ≲ d/t`.
pub fn score_norm_bound(d: usize, t: f64) -> f64 {
    d as f64 / -(-2.0 * t).exp_m1()
}

/// Monte Carlo `E‖∇ln q_t‖²` under exact samples of `q_t`.
pub fn score_norm_sq(model: &TargetModel, t: f64, n: usize, rng: &RngStream) -> Result<(f64, f64)> {
    let xs = model.sample_exact(t, n, rng)?;
    let marg = model.marginal(t);
    let mut s = vec![0.0; model.dim()];
    let vals: Vec<f64> = xs
        .rows()
        .map(|x| {
            marg.score_into(x, &mut s);
            s.iter().map(|v| v * v).sum()
        })
        .collect();
    Ok(mean_and_se(&vals))
}

/// `TV(q_T, N(0, I))`: exact for 1-D Gaussian targets, otherwise the Monte
/// Carlo form `E_{q_T}[(1 - φ/q_T)_+]` with exact densities.
pub fn ou_tv_to_stationary(model: &TargetModel, t: f64, n: usize, rng: &RngStream) -> Result<(f64, f64)> {
    let d = model.dim();
    if d == 1 && model.is_gaussian() {
        let (m, c) = model.moments(t);
        return Ok((gaussian_tv_1d(m[0], c[0], 0.0, 1.0), 0.0));
    }
    let xs = model.sample_exact(t, n, rng)?;
    let marg = model.marginal(t);
    let log_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
    let vals: Vec<f64> = xs
        .rows()
        .map(|x| {
            let lphi = log_norm - 0.5 * x.iter().map(|v| v * v).sum::<f64>();
            (1.0 - (lphi - marg.log_density(x)).exp()).max(0.0)
        })
        .collect();
    Ok(mean_and_se(&vals))
}

/// Times at which the OU mixing bound is probed.
pub const MIXING_TIMES: [f64; 5] = [1.0, 1.5, 2.0, 2.5, 3.0];
/// Accepted range for the fitted `d ln TV / dT`.
pub const MIXING_SLOPE_RANGE: (f64, f64) = (-1.4, -0.6);

/// Checks `E‖∇ln q_t‖² ≤ d/(1 - e^{-2t})` on `t_grid`, `TV(q_T, N(0, I)) ≤
/// (√d + m2) e^{-T}` on [`MIXING_TIMES`], and that `ln TV` decays in `T`
/// with slope inside [`MIXING_SLOPE_RANGE`].
pub fn check_helper_lemmas(model: &TargetModel, t_grid: &[f64], n: usize, rng: &RngStream) -> Result<Vec<LemmaCheck>> {
    check_n(n)?;
    let d = model.dim();
    let mut rows = Vec::new();
    for (i, &t) in t_grid.iter().enumerate() {
        if !(t > 0.0) {
            return Err(SamplerError::InvalidParameter(format!("lemma times must be positive, got {t}")));
        }
        let (value, stderr) = score_norm_sq(model, t, n, &rng.fork_path(&[0, i as u64]))?;
        let bound = score_norm_bound(d, t);
        rows.push(LemmaCheck { lemma: "score_norm".into(), t, value, stderr, bound, pass: value <= bound });
    }
    let mut tvs = Vec::new();
    for (i, &t) in MIXING_TIMES.iter().enumerate() {
        let (value, stderr) = ou_tv_to_stationary(model, t, n, &rng.fork_path(&[1, i as u64]))?;
        let bound = ((d as f64).sqrt() + model.m2()) * (-t).exp();
        rows.push(LemmaCheck { lemma: "ou_tv".into(), t, value, stderr, bound, pass: value <= bound });
        tvs.push(value);
    }
    if tvs.iter().all(|v| *v > 0.0) {
        let lt: Vec<f64> = tvs.iter().map(|v| v.ln()).collect();
        let (slope, _) = ols(&MIXING_TIMES, &lt).unwrap_or((f64::NAN, 0.0));
        let (lo, hi) = MIXING_SLOPE_RANGE;
        rows.push(LemmaCheck {
            lemma: "ou_tv_slope".into(),
            t: f64::NAN,
            value: slope,
            stderr: 0.0,
            bound: lo,
            pass: slope >= lo && slope <= hi,
        });
    } else {
        rows.push(LemmaCheck {
            lemma: "ou_tv_slope".into(),
            t: f64::NAN,
            value: f64::NAN,
            stderr: 0.0,
            bound: MIXING_SLOPE_RANGE.0,
            pass: false,
        });
    }
    Ok(rows)
}

/// One CSV row (schema v1; column order is fixed by [`CSV_COLUMNS`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
    #[serde(rename = "config-hash")]
    pub config_hash: String,
}

/// Everything measured on one output batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub w2: Option<W2Estimate>,
    pub tv: Option<TvEstimate>,
    pub orders: Vec<(String, OrderFit)>,
}

impl MetricReport {
    /// W2 and TV of `batch` against `target`. Directions come from `rng`.
    pub fn measure(batch: &Batch, target: &TargetModel, rng: &RngStream) -> Result<Self> {
        Ok(Self {
            n: batch.len(),
            w2: Some(w2_to_target(batch, target, &rng.fork(0))?),
            tv: Some(tv_estimate(batch, target, &rng.fork(1))?),
            orders: Vec::new(),
        })
    }

    pub fn rows(&self, config_hash: &str) -> Vec<MetricRow> {
        let row = |metric: &str, value: f64, stderr: f64| MetricRow {
            metric: metric.into(),
            value,
            stderr,
            n: self.n,
            config_hash: config_hash.into(),
        };
        let mut out = Vec::new();
        if let Some(w) = &self.w2 {
            out.push(row(&format!("w2_{}", w.method), w.value, w.stderr));
            if let Some(g) = w.gaussian {
                out.push(row("w2_gaussian_fit", g, f64::NAN));
            }
        }
        if let Some(t) = &self.tv {
            out.push(row("tv_projection_lower_bound", t.value, t.stderr));
            if let Some(g) = t.gaussian_fit {
                out.push(row("tv_gaussian_fit", g, f64::NAN));
            }
        }
        for (name, f) in &self.orders {
            out.push(row(&format!("order_{name}"), f.slope, f.half_width() / 1.96));
        }
        out
    }
}

/// Writes rows with the schema-v1 header.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_COLUMNS).map_err(|e| SamplerError::Io(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| SamplerError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn gauss(mean: f64, var: f64, n: usize, seed: u64) -> Batch {
        TargetModel::isotropic_gaussian(vec![mean], var).unwrap().sample_exact(0.0, n, &RngStream::new(seed)).unwrap()
    }

    #[test]
    fn identical_batches_have_zero_w2() {
        let a = gauss(0.0, 1.0, 500, 1);
        assert_eq!(w2_empirical(&a, &a, &RngStream::new(0)).unwrap().value, 0.0);
        let m = TargetModel::standard_normal(3).unwrap();
        let b = m.sample_exact(0.0, 500, &RngStream::new(2)).unwrap();
        assert_eq!(w2_empirical(&b, &b, &RngStream::new(0)).unwrap().value, 0.0);
    }

    #[test]
    fn small_samples_are_rejected() {
        let a = gauss(0.0, 1.0, 99, 1);
        assert!(matches!(w2_empirical(&a, &a, &RngStream::new(0)), Err(SamplerError::SampleSizeTooSmall { .. })));
        let m = TargetModel::standard_normal(1).unwrap();
        assert!(tv_estimate(&a, &m, &RngStream::new(0)).is_err());
    }

    #[test]
    fn mean_shift_and_scale_w2() {
        let a = gauss(0.0, 1.0, 100_000, 1);
        let b = gauss(1.0, 1.0, 100_000, 2);
        let w = w2_empirical(&a, &b, &RngStream::new(0)).unwrap().value;
        assert!((0.97..=1.03).contains(&w), "{w}");
        let c = gauss(0.0, 4.0, 100_000, 3);
        let w = w2_empirical(&a, &c, &RngStream::new(0)).unwrap().value;
        assert!((w - 1.0).abs() < 0.03, "{w}");
        let t = TargetModel::isotropic_gaussian(vec![0.0], 4.0).unwrap();
        let w = w2_to_target(&a, &t, &RngStream::new(0)).unwrap();
        assert!((w.value - 1.0).abs() < 0.03, "{w:?}");
        assert!((w.gaussian.unwrap() - 1.0).abs() < 0.03);
    }

    #[test]
    fn unequal_sizes_use_merged_quantiles() {
        let a = [0.0, 1.0];
        let b = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(w2_sq_sorted(&a, &b).0, 0.0);
        let b = [0.0, 1.0, 1.0];
        // quantile functions differ on (1/3, 1/2) by 1
        assert_relative_eq!(w2_sq_sorted(&a, &b).0, 1.0 / 6.0, max_relative = 1e-12);
    }

    #[test]
    fn coupled_rms_of_a_shift() {
        let a = gauss(0.0, 1.0, 1000, 1);
        let mut b = a.clone();
        b.as_mut_slice().iter_mut().for_each(|v| *v += 0.5);
        let w = coupled_rms(&a, &b).unwrap();
        assert_relative_eq!(w.value, 0.5, max_relative = 1e-12);
        assert!(w.stderr < 1e-12);
    }

    #[test]
    fn gaussian_w2_closed_form() {
        assert_relative_eq!(gaussian_w2(&[0.0], &[1.0], &[0.0], &[4.0]).unwrap(), 1.0, max_relative = 1e-12);
        // commuting covariances: W2² = Σ (sqrt(a_i) - sqrt(b_i))²
        let w = gaussian_w2(&[1.0, 0.0], &[4.0, 0.0, 0.0, 1.0], &[0.0, 0.0], &[1.0, 0.0, 0.0, 9.0]).unwrap();
        assert_relative_eq!(w, (1.0f64 + 1.0 + 4.0).sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn sliced_lower_bounds_gaussian_w2() {
        let mut rng = RngStream::new(11);
        for case in 0..5 {
            let mut g = [0.0; 4];
            rng.fill_normal(&mut g);
            let c1 = vec![1.0 + g[0] * g[0], 0.5 * g[1], 0.5 * g[1], 1.0 + g[1] * g[1]];
            let c2 = vec![0.5 + g[2] * g[2], -0.3 * g[3], -0.3 * g[3], 0.5 + g[3] * g[3]];
            let exact = gaussian_w2(&[0.0, 0.0], &c1, &[0.5, 0.0], &c2).unwrap();
            let a = TargetModel::anisotropic_gaussian(vec![0.0, 0.0], vec![c1[..2].to_vec(), c1[2..].to_vec()]).unwrap();
            let b = TargetModel::anisotropic_gaussian(vec![0.5, 0.0], vec![c2[..2].to_vec(), c2[2..].to_vec()]).unwrap();
            let xa = a.sample_exact(0.0, 20_000, &RngStream::new(case)).unwrap();
            let sliced = w2_to_target(&xa, &b, &RngStream::new(100 + case)).unwrap();
            assert!(sliced.value <= exact + 3.0 * sliced.stderr + 0.02, "case {case}: {} vs {exact}", sliced.value);
        }
    }

    #[test]
    fn tv_self_distance_is_small() {
        let m = TargetModel::standard_normal(2).unwrap();
        let x = m.sample_exact(0.0, 100_000, &RngStream::new(5)).unwrap();
        let tv = tv_estimate(&x, &m, &RngStream::new(6)).unwrap();
        assert!(tv.value <= 0.02, "{tv:?}");
        assert!(tv.gaussian_fit.unwrap() < 0.02);
    }

    #[test]
    fn tv_mean_shift_matches_cdf_oracle() {
        let x = gauss(0.5, 1.0, 100_000, 7);
        let m = TargetModel::standard_normal(1).unwrap();
        let tv = tv_estimate(&x, &m, &RngStream::new(8)).unwrap();
        let exact = 2.0 * normal_cdf(0.25) - 1.0;
        assert_relative_eq!(exact, 0.1974, epsilon = 1e-4);
        assert!((tv.value - exact).abs() <= 0.02, "{tv:?}");
        assert!((tv.gaussian_fit.unwrap() - exact).abs() <= 0.02);
    }

    #[test]
    fn tv_separated_supports() {
        let x = gauss(0.0, 0.01, 100_000, 9);
        let m = TargetModel::isotropic_gaussian(vec![10.0], 0.01).unwrap();
        assert!(tv_estimate(&x, &m, &RngStream::new(0)).unwrap().value >= 0.99);
    }

    #[test]
    fn tv_grows_with_separation() {
        let m = TargetModel::standard_normal(1).unwrap();
        let mut last = 0.0;
        for shift in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let x = gauss(shift, 1.0, 20_000, 13);
            let tv = tv_estimate(&x, &m, &RngStream::new(0)).unwrap().value;
            assert!(tv >= last && tv <= 1.0);
            last = tv;
        }
    }

    #[test]
    fn gaussian_tv_1d_cases() {
        assert_relative_eq!(gaussian_tv_1d(0.5, 1.0, 0.0, 1.0), 2.0 * normal_cdf(0.25) - 1.0, max_relative = 1e-12);
        assert_eq!(gaussian_tv_1d(0.0, 2.0, 0.0, 2.0), 0.0);
        // equal means: crossings at ±r with r² = ln(v2/v1) v1 v2 / (v2 - v1)
        let r = (4.0f64.ln() * 4.0 / 3.0).sqrt();
        let exact = (2.0 * normal_cdf(r) - 1.0) - (2.0 * normal_cdf(r / 2.0) - 1.0);
        assert_relative_eq!(gaussian_tv_1d(0.0, 1.0, 0.0, 4.0), exact, max_relative = 1e-12);
        let mc = gaussian_tv(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0], &[0.5, 0.0], &[1.0, 0.0, 0.0, 1.0], &RngStream::new(1))
            .unwrap();
        assert!((mc - (2.0 * normal_cdf(0.25) - 1.0)).abs() < 0.01, "{mc}");
    }

    #[test]
    fn order_of_exact_power_laws() {
        let h = [0.1, 0.05, 0.025, 0.0125];
        let f = fit_order(&h, &h.map(|v| v * v)).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-6 && f.half_width() < 1e-6, "{f:?}");
        let f = fit_order(&h, &h.map(|v| 3.0 * v)).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-9);
        assert_relative_eq!(f.intercept, 3.0f64.ln(), max_relative = 1e-9);
        assert!(fit_order(&[0.1], &[0.1]).is_err());
        assert!(fit_order(&[0.1, 0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn order_recovered_from_noisy_data() {
        let mut rng = RngStream::new(4);
        let h: Vec<f64> = (0..12).map(|k| 0.2 * 0.8f64.powi(k)).collect();
        let err: Vec<f64> = h.iter().map(|v| 2.0 * v.powf(1.5) * (0.1 * rng.normal()).exp()).collect();
        let f = fit_order(&h, &err).unwrap();
        assert!(f.ci_low <= 1.5 && 1.5 <= f.ci_high, "{f:?}");
    }

    #[test]
    fn helper_lemma_table() {
        let m = TargetModel::isotropic_gaussian(vec![0.0], 4.0).unwrap();
        let rows = check_helper_lemmas(&m, &[0.01, 0.1, 1.0], 20_000, &RngStream::new(3)).unwrap();
        assert!(rows.iter().filter(|r| r.lemma == "score_norm").all(|r| r.pass));
        assert!(rows.iter().filter(|r| r.lemma == "ou_tv").all(|r| r.pass));
        // N(0, 4) at t: E s² = 1/(1 + 3e^{-2t})
        let r = &rows[2];
        assert!((r.value - 1.0 / (1.0 + 3.0 * (-2.0f64).exp())).abs() < 4.0 * r.stderr + 1e-9);
    }

    #[test]
    fn csv_header_and_rows() {
        let report = MetricReport {
            n: 100,
            w2: Some(W2Estimate { value: 0.5, stderr: 0.1, n: 100, method: "quantile".into(), gaussian: None }),
            tv: None,
            orders: vec![],
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &report.rows("abc")).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "metric,value,stderr,n,config-hash\nw2_quantile,0.5,0.1,100,abc\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn tv_is_a_probability(shift in -3.0f64..3.0, var in 0.2f64..3.0, seed in 0u64..1000) {
            let x = gauss(shift, var, 400, seed);
            let m = TargetModel::standard_normal(1).unwrap();
            let tv = tv_estimate(&x, &m, &RngStream::new(seed)).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&tv));
        }

        #[test]
        fn exact_gaussian_tv_is_symmetric(m1 in -2.0f64..2.0, v1 in 0.1f64..4.0, m2 in -2.0f64..2.0, v2 in 0.1f64..4.0) {
            let a = gaussian_tv_1d(m1, v1, m2, v2);
            let b = gaussian_tv_1d(m2, v2, m1, v1);
            prop_assert!((a - b).abs() < 1e-10);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
