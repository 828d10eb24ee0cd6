//! Analytic targets and their noised marginals along the Ornstein–Uhlenbeck
//! forward process `dx = -x dt + sqrt(2) dB`.
//!
//! Every target is a finite mixture of Gaussians, so `q_t` stays a Gaussian
//! mixture for all `t >= 0`: a component `N(mu, S)` becomes
//! `N(e^{-t} mu, e^{-2t} S + (1 - e^{-2t}) I)`. Scores, log-densities, exact
//! samples and one-dimensional projections are all closed form.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::batch::{for_each_chunk, Batch};
use crate::error::{Result, SamplerError};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetKind {
    IsotropicGaussian,
    AnisotropicGaussian,
    GaussianMixture,
    QuadraticLogConcave,
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TargetKind::IsotropicGaussian => "isotropic-gaussian",
            TargetKind::AnisotropicGaussian => "anisotropic-gaussian",
            TargetKind::GaussianMixture => "gaussian-mixture",
            TargetKind::QuadraticLogConcave => "quadratic-log-concave",
        };
        f.write_str(s)
    }
}

/// On-disk description of a target.
///
/// `covs` holds full `dim x dim` matrices. `weights` may be omitted for a
/// single component. `m` and `L` are the curvature bounds handed to the
/// schedules; when absent they are derived from the covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub kind: TargetKind,
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub weights: Vec<f64>,
    #[serde(default)]
    pub m: Option<f64>,
    #[serde(default, rename = "L")]
    pub l: Option<f64>,
}

/// One Gaussian component, stored in its covariance eigenbasis.
#[derive(Debug, Clone)]
struct Component {
    mean: Vec<f64>,
    eigvals: Vec<f64>,
    /// Row-major eigenvector matrix (columns are eigenvectors); `None` when
    /// the covariance is diagonal.
    basis: Option<Vec<f64>>,
}

impl Component {
    fn new(mean: Vec<f64>, cov: &[Vec<f64>]) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return Err(SamplerError::InvalidModel(format!("covariance must be {d} x {d}")));
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (cov[i][j], cov[j][i]);
                if (a - b).abs() > 1e-10 * (1.0 + a.abs().max(b.abs())) {
                    return Err(SamplerError::InvalidModel("covariance is not symmetric".into()));
                }
            }
        }
        if mean.iter().chain(cov.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(SamplerError::InvalidModel("non-finite target parameter".into()));
        }
        let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || cov[i][j] == 0.0));
        let (eigvals, basis) = if diagonal {
            ((0..d).map(|i| cov[i][i]).collect::<Vec<_>>(), None)
        } else {
            let m = DMatrix::from_fn(d, d, |i, j| 0.5 * (cov[i][j] + cov[j][i]));
            let eig = SymmetricEigen::new(m);
            let mut q = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    q[i * d + j] = eig.eigenvectors[(i, j)];
                }
            }
            (eig.eigenvalues.iter().copied().collect(), Some(q))
        };
        if eigvals.iter().any(|&l| !(l > 0.0)) {
            return Err(SamplerError::InvalidModel("covariance is not positive definite".into()));
        }
        Ok(Self { mean, eigvals, basis })
    }

    fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `Q^T y` (or `y` for a diagonal covariance).
    fn to_eigen(&self, y: &[f64], out: &mut [f64]) {
        match &self.basis {
            None => out.copy_from_slice(y),
            Some(q) => {
                let d = self.dim();
                for (j, o) in out.iter_mut().enumerate() {
                    *o = (0..d).map(|i| q[i * d + j] * y[i]).sum();
                }
            }
        }
    }

    /// `Q z`.
    fn from_eigen(&self, z: &[f64], out: &mut [f64]) {
        match &self.basis {
            None => out.copy_from_slice(z),
            Some(q) => {
                let d = self.dim();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = q[i * d..(i + 1) * d].iter().zip(z).map(|(a, b)| a * b).sum();
                }
            }
        }
    }

    fn cov_matrix(&self) -> Vec<f64> {
        let d = self.dim();
        let mut c = vec![0.0; d * d];
        match &self.basis {
            None => (0..d).for_each(|i| c[i * d + i] = self.eigvals[i]),
            Some(q) => {
                for i in 0..d {
                    for j in 0..d {
                        c[i * d + j] = (0..d).map(|k| q[i * d + k] * self.eigvals[k] * q[j * d + k]).sum();
                    }
                }
            }
        }
        c
    }
}

/// An analytic target distribution.
#[derive(Debug, Clone)]
pub struct TargetModel {
    kind: TargetKind,
    dim: usize,
    log_weights: Vec<f64>,
    weights: Vec<f64>,
    components: Vec<Component>,
    m: f64,
    l: f64,
}

impl TargetModel {
    pub fn from_spec(spec: &TargetSpec) -> Result<Self> {
        let d = spec.dim;
        if d == 0 {
            return Err(SamplerError::InvalidModel("dimension must be positive".into()));
        }
        if spec.means.is_empty() || spec.means.len() != spec.covs.len() {
            return Err(SamplerError::InvalidModel(format!(
                "need one covariance per mean, got {} means and {} covariances",
                spec.means.len(),
                spec.covs.len()
            )));
        }
        let k = spec.means.len();
        if spec.kind != TargetKind::GaussianMixture && k != 1 {
            return Err(SamplerError::InvalidModel(format!("{} has exactly one component", spec.kind)));
        }
        let weights = if spec.weights.is_empty() && k == 1 { vec![1.0] } else { spec.weights.clone() };
        if weights.len() != k {
            return Err(SamplerError::InvalidModel(format!("expected {k} weights, got {}", weights.len())));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(SamplerError::InvalidModel("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(SamplerError::InvalidModel(format!("mixture weights sum to {total}, not 1")));
        }
        let mut components = Vec::with_capacity(k);
        for (mean, cov) in spec.means.iter().zip(&spec.covs) {
            if mean.len() != d {
                return Err(SamplerError::DimensionMismatch { expected: d, got: mean.len() });
            }
            components.push(Component::new(mean.clone(), cov)?);
        }
        if spec.kind == TargetKind::IsotropicGaussian {
            let c = &components[0];
            let v0 = c.eigvals[0];
            if c.basis.is_some() || c.eigvals.iter().any(|&v| (v - v0).abs() > 1e-12 * v0) {
                return Err(SamplerError::InvalidModel("isotropic covariance must be a multiple of I".into()));
            }
        }

        let lam_min = components.iter().flat_map(|c| c.eigvals.iter().copied()).fold(f64::INFINITY, f64::min);
        let lam_max = components.iter().flat_map(|c| c.eigvals.iter().copied()).fold(0.0, f64::max);
        let derived_l = if k == 1 {
            1.0 / lam_min
        } else {
            // -Hess ln q <= max precision, and the posterior spread over
            // components adds at most diam^2 / (4 lam_min^2).
            let mut diam2: f64 = 0.0;
            for a in &components {
                for b in &components {
                    diam2 = diam2.max(a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum());
                }
            }
            (1.0 / lam_min).max(diam2 / (4.0 * lam_min * lam_min))
        };
        let derived_m = 1.0 / lam_max;
        let l = spec.l.unwrap_or(derived_l);
        let m = spec.m.unwrap_or(derived_m);
        if spec.kind == TargetKind::QuadraticLogConcave && !(m > 0.0 && m <= l) {
            return Err(SamplerError::InvalidModel(format!("need 0 < m <= L, got m = {m}, L = {l}")));
        }
        if !(l > 0.0 && l.is_finite()) {
            return Err(SamplerError::InvalidModel(format!("smoothness L = {l} must be positive")));
        }

        Ok(Self {
            kind: spec.kind,
            dim: d,
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            weights,
            components,
            m,
            l,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: TargetSpec = serde_json::from_str(text).map_err(|e| SamplerError::Config(e.to_string()))?;
        Self::from_spec(&spec)
    }

    /// `N(mean, var * I)`.
    pub fn isotropic_gaussian(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::from_spec(&TargetSpec {
            kind: TargetKind::IsotropicGaussian,
            dim: d,
            covs: vec![diag_matrix(&vec![var; d])],
            means: vec![mean],
            weights: vec![],
            m: None,
            l: None,
        })
    }

    /// `N(0, I_d)`, the stationary law of the forward process.
    pub fn standard_normal(d: usize) -> Result<Self> {
        Self::isotropic_gaussian(vec![0.0; d], 1.0)
    }

    pub fn anisotropic_gaussian(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_spec(&TargetSpec {
            kind: TargetKind::AnisotropicGaussian,
            dim: mean.len(),
            means: vec![mean],
            covs: vec![cov],
            weights: vec![],
            m: None,
            l: None,
        })
    }

    pub fn gaussian_mixture(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let dim = means.first().map(Vec::len).unwrap_or(0);
        Self::from_spec(&TargetSpec { kind: TargetKind::GaussianMixture, dim, means, covs, weights, m: None, l: None })
    }

    /// Log-concave target with quadratic potential, i.e. `N(mean, cov)`, with
    /// `m` and `L` the extreme eigenvalues of the precision.
    pub fn quadratic_log_concave(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_spec(&TargetSpec {
            kind: TargetKind::QuadraticLogConcave,
            dim: mean.len(),
            means: vec![mean],
            covs: vec![cov],
            weights: vec![],
            m: None,
            l: None,
        })
    }

    /// Same model with the curvature bounds replaced.
    pub fn with_curvature(mut self, m: f64, l: f64) -> Result<Self> {
        if !(m > 0.0 && m <= l && l.is_finite()) {
            return Err(SamplerError::InvalidModel(format!("need 0 < m <= L, got m = {m}, L = {l}")));
        }
        self.m = m;
        self.l = l;
        Ok(self)
    }

    pub fn kind(&self) -> TargetKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Strong-convexity constant of the potential.
    pub fn strong_convexity(&self) -> f64 {
        self.m
    }

    /// Smoothness constant used by the schedules.
    pub fn smoothness(&self) -> f64 {
        self.l
    }

    pub fn is_gaussian(&self) -> bool {
        self.components.len() == 1
    }

    /// `sqrt(E ||x||^2)` under the target.
    pub fn m2(&self) -> f64 {
        self.m2_squared().sqrt()
    }

    pub fn m2_squared(&self) -> f64 {
        self.components
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w * (c.mean.iter().map(|v| v * v).sum::<f64>() + c.eigvals.iter().sum::<f64>()))
            .sum()
    }

    /// The maximizer of the density of a single-Gaussian target.
    pub fn root(&self) -> Result<Vec<f64>> {
        if !self.is_gaussian() {
            return Err(SamplerError::InvalidModel("the score root is only available in closed form for a Gaussian".into()));
        }
        Ok(self.components[0].mean.clone())
    }

    pub fn marginal(&self, t: f64) -> NoisedMarginal<'_> {
        NoisedMarginal::new(self, t)
    }

    /// `∇ ln q_t(x)`.
    pub fn score(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(t, x)?;
        let mut out = vec![0.0; self.dim];
        self.marginal(t).score_into(x, &mut out);
        Ok(out)
    }

    pub fn log_density(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.check_point(t, x)?;
        Ok(self.marginal(t).log_density(x))
    }

    fn check_point(&self, t: f64, x: &[f64]) -> Result<()> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(SamplerError::InvalidParameter(format!("forward time must be >= 0, got {t}")));
        }
        if x.len() != self.dim {
            return Err(SamplerError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SamplerError::InvalidState("non-finite point".into()));
        }
        Ok(())
    }

    /// `n` i.i.d. draws from `q_t`.
    pub fn sample_exact(&self, t: f64, n: usize, rng: &RngStream) -> Result<Batch> {
        if n == 0 {
            return Err(SamplerError::InvalidParameter("need at least one sample".into()));
        }
        let marg = self.marginal(t);
        let d = self.dim;
        let mut data = vec![0.0; n * d];
        for_each_chunk(&mut data, d, |c, rows| {
            let mut r = rng.fork(c as u64);
            let mut z = vec![0.0; d];
            let mut y = vec![0.0; d];
            for row in rows.chunks_exact_mut(d) {
                let k = marg.pick_component(r.uniform());
                r.fill_normal(&mut z);
                let comp = &marg.comps[k];
                for (zi, s) in z.iter_mut().zip(&comp.sd) {
                    *zi *= s;
                }
                self.components[k].from_eigen(&z, &mut y);
                for ((o, yi), mu) in row.iter_mut().zip(&y).zip(&comp.mean) {
                    *o = mu + yi;
                }
            }
            Ok(())
        })?;
        Batch::new(d, data)
    }

    /// Law of `u^T x` for `x ~ q_t` and a unit vector `u`.
    pub fn project(&self, t: f64, u: &[f64]) -> Mixture1d {
        let marg = self.marginal(t);
        let d = self.dim;
        let mut w = vec![0.0; d];
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for (comp, noised) in self.components.iter().zip(&marg.comps) {
            means.push(noised.mean.iter().zip(u).map(|(a, b)| a * b).sum());
            comp.to_eigen(u, &mut w);
            vars.push(w.iter().zip(&noised.var).map(|(wi, v)| wi * wi * v).sum());
        }
        Mixture1d::new(self.weights.clone(), means, vars)
    }

    /// Mean and row-major covariance of `q_t`.
    pub fn moments(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let marg = self.marginal(t);
        let mut mean = vec![0.0; d];
        for (w, c) in self.weights.iter().zip(&marg.comps) {
            for (m, v) in mean.iter_mut().zip(&c.mean) {
                *m += w * v;
            }
        }
        let a = (-2.0 * t).exp();
        let mut cov = vec![0.0; d * d];
        for ((w, comp), noised) in self.weights.iter().zip(&self.components).zip(&marg.comps) {
            let c0 = comp.cov_matrix();
            for i in 0..d {
                for j in 0..d {
                    let eye = if i == j { 1.0 - a } else { 0.0 };
                    let di = noised.mean[i] - mean[i];
                    let dj = noised.mean[j] - mean[j];
                    cov[i * d + j] += w * (a * c0[i * d + j] + eye + di * dj);
                }
            }
        }
        (mean, cov)
    }
}

fn diag_matrix(v: &[f64]) -> Vec<Vec<f64>> {
    let d = v.len();
    (0..d).map(|i| (0..d).map(|j| if i == j { v[i] } else { 0.0 }).collect()).collect()
}

#[derive(Debug, Clone)]
struct NoisedComponent {
    mean: Vec<f64>,
    var: Vec<f64>,
    sd: Vec<f64>,
    log_norm: f64,
}

/// `q_t` for a fixed forward time, with per-component quantities precomputed.
#[derive(Debug, Clone)]
pub struct NoisedMarginal<'a> {
    base: &'a TargetModel,
    t: f64,
    comps: Vec<NoisedComponent>,
}

impl<'a> NoisedMarginal<'a> {
    pub fn new(base: &'a TargetModel, t: f64) -> Self {
        let decay = (-t).exp();
        let a = (-2.0 * t).exp();
        let b = -(-2.0 * t).exp_m1();
        let comps = base
            .components
            .iter()
            .map(|c| {
                let var: Vec<f64> = c.eigvals.iter().map(|l| a * l + b).collect();
                let log_norm = -0.5 * var.iter().map(|v| (2.0 * PI * v).ln()).sum::<f64>();
                NoisedComponent {
                    mean: c.mean.iter().map(|m| decay * m).collect(),
                    sd: var.iter().map(|v| v.sqrt()).collect(),
                    var,
                    log_norm,
                }
            })
            .collect();
        Self { base, t, comps }
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn base(&self) -> &TargetModel {
        self.base
    }

    fn pick_component(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (k, w) in self.base.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        self.base.weights.len() - 1
    }

    /// Eigen-coordinates of `x - mean_k`, and the component's log-density.
    fn component_terms(&self, k: usize, x: &[f64], y: &mut [f64], z: &mut [f64]) -> f64 {
        let c = &self.comps[k];
        for ((yi, xi), mi) in y.iter_mut().zip(x).zip(&c.mean) {
            *yi = xi - mi;
        }
        self.base.components[k].to_eigen(y, z);
        let quad: f64 = z.iter().zip(&c.var).map(|(zi, v)| zi * zi / v).sum();
        c.log_norm - 0.5 * quad
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.base.dim;
        let (mut y, mut z) = (vec![0.0; d], vec![0.0; d]);
        let terms: Vec<f64> = (0..self.comps.len())
            .map(|k| self.base.log_weights[k] + self.component_terms(k, x, &mut y, &mut z))
            .collect();
        log_sum_exp(&terms)
    }

    /// Writes `∇ ln q_t(x)` into `out`.
    pub fn score_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.base.dim;
        let mut y = vec![0.0; d];
        let mut z = vec![0.0; d];
        let mut g = vec![0.0; d];
        if self.comps.len() == 1 {
            self.component_terms(0, x, &mut y, &mut z);
            for (zi, v) in z.iter_mut().zip(&self.comps[0].var) {
                *zi = -*zi / v;
            }
            self.base.components[0].from_eigen(&z, out);
            return;
        }
        let k_n = self.comps.len();
        let mut logits = Vec::with_capacity(k_n);
        let mut grads = vec![0.0; k_n * d];
        for k in 0..k_n {
            logits.push(self.base.log_weights[k] + self.component_terms(k, x, &mut y, &mut z));
            for (zi, v) in z.iter_mut().zip(&self.comps[k].var) {
                *zi = -*zi / v;
            }
            self.base.components[k].from_eigen(&z, &mut g);
            grads[k * d..(k + 1) * d].copy_from_slice(&g);
        }
        let lse = log_sum_exp(&logits);
        out.iter_mut().for_each(|o| *o = 0.0);
        for k in 0..k_n {
            let r = (logits[k] - lse).exp();
            for (o, gk) in out.iter_mut().zip(&grads[k * d..(k + 1) * d]) {
                *o += r * gk;
            }
        }
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// A one-dimensional Gaussian mixture: projections of targets onto a line.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture1d {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
}

impl Mixture1d {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, vars: Vec<f64>) -> Self {
        Self { weights, means, vars }
    }

    pub fn gaussian(mean: f64, var: f64) -> Self {
        Self::new(vec![1.0], vec![mean], vec![var])
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.vars)
            .map(|((w, m), v)| w * (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt())
            .sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.vars)
            .map(|((w, m), v)| w * normal_cdf((x - m) / v.sqrt()))
            .sum()
    }

    /// Inverse cdf by bracketed bisection; `p` in `(0, 1)`.
    pub fn quantile(&self, p: f64) -> f64 {
        let (mut lo, mut hi) = self.support(12.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-13 * (1.0 + mid.abs()) {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    /// Interval containing all components to `k` standard deviations.
    pub fn support(&self, k: f64) -> (f64, f64) {
        let lo = self.means.iter().zip(&self.vars).map(|(m, v)| m - k * v.sqrt()).fold(f64::INFINITY, f64::min);
        let hi = self.means.iter().zip(&self.vars).map(|(m, v)| m + k * v.sqrt()).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.weights.iter().zip(&self.means).zip(&self.vars).map(|((w, m), v)| w * (v + (m - mu) * (m - mu))).sum()
    }

    /// Convolution with `N(0, s2)`.
    pub fn smoothed(&self, s2: f64) -> Self {
        Self::new(self.weights.clone(), self.means.clone(), self.vars.iter().map(|v| v + s2).collect())
    }
}

pub(crate) fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Anything that can evaluate a (possibly approximate) score of `q_t` on a batch.
pub trait ScoreSource: Sync {
    fn dim(&self) -> usize;

    /// Writes the score at each row of `xs` (row-major, `dim()` columns) into `out`.
    fn score_batch(&self, t: f64, xs: &[f64], out: &mut [f64]);
}

impl ScoreSource for TargetModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_batch(&self, t: f64, xs: &[f64], out: &mut [f64]) {
        if self.components.iter().all(|c| c.basis.is_none()) {
            self.score_batch_diagonal(t, xs, out);
            return;
        }
        let marg = self.marginal(t);
        for (x, o) in xs.chunks_exact(self.dim).zip(out.chunks_exact_mut(self.dim)) {
            marg.score_into(x, o);
        }
    }
}

impl TargetModel {
    /// Score for mixtures of axis-aligned components, without building a
    /// [`NoisedMarginal`]. Single-point calls stay allocation-free for one component.
    fn score_batch_diagonal(&self, t: f64, xs: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let decay = (-t).exp();
        let a = decay * decay;
        let b = -(-2.0 * t).exp_m1();
        if self.components.len() == 1 {
            let c = &self.components[0];
            for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                for i in 0..d {
                    o[i] = -(x[i] - decay * c.mean[i]) / (a * c.eigvals[i] + b);
                }
            }
            return;
        }
        let k_n = self.components.len();
        let log_norm: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw - 0.5 * c.eigvals.iter().map(|l| (2.0 * PI * (a * l + b)).ln()).sum::<f64>())
            .collect();
        let mut logits = vec![0.0; k_n];
        for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            for (k, c) in self.components.iter().enumerate() {
                let mut quad = 0.0;
                for i in 0..d {
                    let y = x[i] - decay * c.mean[i];
                    quad += y * y / (a * c.eigvals[i] + b);
                }
                logits[k] = log_norm[k] - 0.5 * quad;
            }
            let lse = log_sum_exp(&logits);
            o.iter_mut().for_each(|v| *v = 0.0);
            for (k, c) in self.components.iter().enumerate() {
                let r = (logits[k] - lse).exp();
                for i in 0..d {
                    o[i] -= r * (x[i] - decay * c.mean[i]) / (a * c.eigvals[i] + b);
                }
            }
        }
    }
}

impl<S: ScoreSource + ?Sized> ScoreSource for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn score_batch(&self, t: f64, xs: &[f64], out: &mut [f64]) {
        (**self).score_batch(t, xs, out)
    }
}

/// Adapts a per-point closure `f(t, x, out)` into a [`ScoreSource`].
pub struct ScoreFn<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64]) + Sync> ScoreFn<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(f64, &[f64], &mut [f64]) + Sync> ScoreSource for ScoreFn<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_batch(&self, t: f64, xs: &[f64], out: &mut [f64]) {
        for (x, o) in xs.chunks_exact(self.dim).zip(out.chunks_exact_mut(self.dim)) {
            (self.f)(t, x, o);
        }
    }
}

/// Number of sinusoidal modes in a perturbation field.
pub const PERTURBATION_MODES: usize = 5;

/// Spatial frequency of every perturbation mode.
pub const PERTURBATION_FREQUENCY: f64 = 0.5;

/// The deterministic error field added by [`CorruptedScore`] at one time.
///
/// `f(x) = A Σ_j c_j cos(k_j·x + φ_j)` with unit directions `c_j`,
/// frequencies of norm [`PERTURBATION_FREQUENCY`] and uniform phases. The
/// amplitude `A` is set so that `E_{q_t} ||f||^2 = eps_sc^2` exactly; for a
/// Gaussian mixture every cross moment of the cosines is closed form.
#[derive(Debug, Clone)]
pub struct PerturbationField {
    dim: usize,
    amplitude: f64,
    directions: Vec<Vec<f64>>,
    freqs: Vec<Vec<f64>>,
    phases: Vec<f64>,
}

impl PerturbationField {
    pub fn new(model: &TargetModel, t: f64, eps_sc: f64, rng: &RngStream) -> Self {
        let d = model.dim();
        let mut r = rng.fork(t.to_bits());
        let unit = |r: &mut RngStream| {
            let mut v = vec![0.0; d];
            loop {
                r.fill_normal(&mut v);
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-12 {
                    v.iter_mut().for_each(|x| *x /= n);
                    return v;
                }
            }
        };
        let directions: Vec<Vec<f64>> = (0..PERTURBATION_MODES).map(|_| unit(&mut r)).collect();
        let freqs: Vec<Vec<f64>> = (0..PERTURBATION_MODES)
            .map(|_| unit(&mut r).into_iter().map(|x| x * PERTURBATION_FREQUENCY).collect())
            .collect();
        let phases: Vec<f64> = (0..PERTURBATION_MODES).map(|_| 2.0 * PI * r.uniform()).collect();

        let marg = model.marginal(t);
        let mut field = Self { dim: d, amplitude: 0.0, directions, freqs, phases };
        let unit_norm2 = field.unit_mean_square(model, &marg);
        field.amplitude = if eps_sc == 0.0 || unit_norm2 <= 0.0 { 0.0 } else { eps_sc / unit_norm2.sqrt() };
        field
    }

    /// `E ||Σ_j c_j cos(k_j·x + φ_j)||^2` under `q_t`.
    fn unit_mean_square(&self, model: &TargetModel, marg: &NoisedMarginal<'_>) -> f64 {
        let d = self.dim;
        let mut w = vec![0.0; d];
        // E cos(a·x + b) for x ~ N(mu, S) is cos(a·mu + b) exp(-a^T S a / 2).
        let e_cos = |a: &[f64], b: f64, w: &mut Vec<f64>| -> f64 {
            let mut acc = 0.0;
            for ((comp, noised), wt) in model.components.iter().zip(&marg.comps).zip(&model.weights) {
                comp.to_eigen(a, w);
                let q: f64 = w.iter().zip(&noised.var).map(|(x, v)| x * x * v).sum();
                let am: f64 = a.iter().zip(&noised.mean).map(|(x, m)| x * m).sum();
                acc += wt * (am + b).cos() * (-0.5 * q).exp();
            }
            acc
        };
        let mut total = 0.0;
        let mut diff = vec![0.0; d];
        let mut sum = vec![0.0; d];
        for j in 0..PERTURBATION_MODES {
            for l in 0..PERTURBATION_MODES {
                let cc: f64 = self.directions[j].iter().zip(&self.directions[l]).map(|(a, b)| a * b).sum();
                for i in 0..d {
                    diff[i] = self.freqs[j][i] - self.freqs[l][i];
                    sum[i] = self.freqs[j][i] + self.freqs[l][i];
                }
                let pj = self.phases[j];
                let pl = self.phases[l];
                total += cc * 0.5 * (e_cos(&diff, pj - pl, &mut w) + e_cos(&sum, pj + pl, &mut w));
            }
        }
        total
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// Adds the field at `x` to `out`.
    pub fn add_to(&self, x: &[f64], out: &mut [f64]) {
        if self.amplitude == 0.0 {
            return;
        }
        for j in 0..PERTURBATION_MODES {
            let arg: f64 = self.freqs[j].iter().zip(x).map(|(k, xi)| k * xi).sum::<f64>() + self.phases[j];
            let c = self.amplitude * arg.cos();
            for (o, dir) in out.iter_mut().zip(&self.directions[j]) {
                *o += c * dir;
            }
        }
    }

    /// Upper bound on the Lipschitz constant of the field.
    pub fn lipschitz_bound(&self) -> f64 {
        self.amplitude * PERTURBATION_MODES as f64 * PERTURBATION_FREQUENCY
    }
}

/// Exact score plus a fixed smooth error field of `L2(q_t)` size `eps_sc`.
///
/// The field at time `t` depends only on the stream key and the bits of `t`.
#[derive(Debug, Clone)]
pub struct CorruptedScore<'a> {
    model: &'a TargetModel,
    eps_sc: f64,
    rng: RngStream,
}

impl<'a> CorruptedScore<'a> {
    pub fn new(model: &'a TargetModel, eps_sc: f64, rng: &RngStream) -> Result<Self> {
        if !(eps_sc >= 0.0) || !eps_sc.is_finite() {
            return Err(SamplerError::InvalidParameter(format!("score error must be >= 0, got {eps_sc}")));
        }
        Ok(Self { model, eps_sc, rng: rng.clone() })
    }

    pub fn field(&self, t: f64) -> PerturbationField {
        PerturbationField::new(self.model, t, self.eps_sc, &self.rng)
    }

    pub fn score(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut s = self.model.score(t, x)?;
        if self.eps_sc > 0.0 {
            self.field(t).add_to(x, &mut s);
        }
        Ok(s)
    }
}

impl ScoreSource for CorruptedScore<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn score_batch(&self, t: f64, xs: &[f64], out: &mut [f64]) {
        self.model.score_batch(t, xs, out);
        if self.eps_sc > 0.0 {
            let field = self.field(t);
            let d = self.model.dim();
            for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                field.add_to(x, o);
            }
        }
    }
}

/// Free-function form of [`CorruptedScore::score`].
pub fn corrupt_score(model: &TargetModel, t: f64, x: &[f64], eps_sc: f64, rng: &RngStream) -> Result<Vec<f64>> {
    CorruptedScore::new(model, eps_sc, rng)?.score(t, x)
}
