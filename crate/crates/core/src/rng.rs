//! Deterministic, hierarchically keyed randomness.
//!
//! A stream is identified by a seed and a path of integers (run, block, step,
//! chunk, ...). Forking derives a child key from the parent key alone, never
//! from the parent's consumed state, so the draws a particle sees depend only
//! on its path. The generator behind each key is ChaCha8, which is itself
//! counter based.
//!
//! This module also samples the correlated Gaussian blocks that drive the
//! underdamped integrators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SamplerError};

/// Version of the path-to-key derivation; embedded in run reports.
pub const KEY_SCHEMA_VERSION: u32 = 1;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 128-bit key of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub hi: u64,
    pub lo: u64,
}

impl StreamKey {
    fn root(seed: u64) -> Self {
        Self {
            hi: splitmix64(seed ^ 0x6A09_E667_F3BC_C908),
            lo: splitmix64(seed.rotate_left(29) ^ 0xBB67_AE85_84CA_A73B),
        }
    }

    fn child(self, index: u64) -> Self {
        let a = splitmix64(self.hi ^ splitmix64(index.wrapping_add(self.lo)));
        let b = splitmix64(self.lo ^ splitmix64(index.rotate_left(31) ^ a));
        Self { hi: a, lo: b }
    }

    fn chacha_seed(self) -> [u8; 32] {
        let words = [self.hi, self.lo, splitmix64(self.hi ^ GOLDEN), splitmix64(self.lo.wrapping_add(GOLDEN))];
        let mut seed = [0u8; 32];
        for (i, w) in words.iter().enumerate() {
            seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
        }
        seed
    }
}

/// A keyed random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: StreamKey,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::from_key(StreamKey::root(seed))
    }

    pub fn from_key(key: StreamKey) -> Self {
        Self { key, rng: ChaCha8Rng::from_seed(key.chacha_seed()) }
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }

    /// Child stream at `index` below this one. Pure in the parent's key.
    pub fn fork(&self, index: u64) -> Self {
        Self::from_key(self.key.child(index))
    }

    /// Child stream at a multi-level path below this one.
    pub fn fork_path(&self, path: &[u64]) -> Self {
        let key = path.iter().fold(self.key, |k, &i| k.child(i));
        Self::from_key(key)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random::<u64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.rng.sample(StandardNormal);
        }
    }
}

/// Uniform draw on the `i`-th of `r` equal sub-intervals of `[0, 1]` (1-based `i`).
///
/// With `r = 1` this is a uniform draw on `[0, 1]`.
pub fn uniform_midpoint(rng: &mut RngStream, i: usize, r: usize) -> f64 {
    debug_assert!(i >= 1 && i <= r, "midpoint index {i} outside 1..={r}");
    ((i - 1) as f64 + rng.uniform()) / r as f64
}

/// `z - a - a^2/2` with `a = 1 - e^{-z}`, i.e. `g * ∫_0^{z/g} (1 - e^{-g s})^2 ds`.
///
/// The closed form cancels catastrophically for small `z`; a power series
/// takes over there.
fn psi(z: f64) -> f64 {
    if z < 0.1 {
        // sum_{k>=2} (-1)^k (2^k - 2) z^{k+1} / (k+1)!
        let mut sum = 0.0;
        let mut pow = z * z * z / 6.0; // z^3 / 3!
        for k in 2..20u32 {
            let coeff = (2f64.powi(k as i32) - 2.0) * if k % 2 == 0 { 1.0 } else { -1.0 };
            sum += coeff * pow;
            pow *= z / (k as f64 + 2.0);
        }
        sum
    } else {
        let a = -(-z).exp_m1();
        z - a - 0.5 * a * a
    }
}

/// `∫_0^t (1 - e^{-g s})^2 ds`.
fn int_one_minus_exp_sq(g: f64, t: f64) -> f64 {
    psi(g * t) / g
}

/// `∫_0^t (1 - e^{-g s}) e^{-g s} ds`.
fn int_one_minus_exp_times_exp(g: f64, t: f64) -> f64 {
    let a = -(-g * t).exp_m1();
    a * a / (2.0 * g)
}

/// Per-coordinate covariance of the Brownian contribution to one
/// exponential-integrator step of underdamped Langevin dynamics with friction
/// `gamma` over duration `delta`, pre-scaled by `sqrt(2 gamma)`.
///
/// Returns `(var_x, cov_xv, var_v)`.
pub fn uld_noise_covariance(delta: f64, gamma: f64) -> (f64, f64, f64) {
    let z = gamma * delta;
    let a = -(-z).exp_m1();
    let var_v = -(-2.0 * z).exp_m1();
    let cov_xv = a * a / gamma;
    let var_x = 2.0 / gamma * int_one_minus_exp_sq(gamma, delta);
    (var_x, cov_xv, var_v)
}

/// Brownian increments for one underdamped step, already scaled so the update adds them directly.
#[derive(Debug, Clone, PartialEq)]
pub struct UldNoiseBlock {
    pub zeta_x: Vec<f64>,
    pub zeta_v: Vec<f64>,
    pub step: f64,
    pub gamma: f64,
}

/// Factored noise law for a fixed `(delta, gamma)`.
#[derive(Debug, Clone, Copy)]
pub struct UldNoiseLaw {
    pub delta: f64,
    pub gamma: f64,
    // v = l_vv g1, x = l_xv g1 + l_xx g2
    l_vv: f64,
    l_xv: f64,
    l_xx: f64,
}

impl UldNoiseLaw {
    pub fn new(delta: f64, gamma: f64) -> Result<Self> {
        if !(delta > 0.0 && gamma > 0.0) {
            return Err(SamplerError::InvalidParameter(format!(
                "noise law needs delta > 0 and gamma > 0, got delta = {delta}, gamma = {gamma}"
            )));
        }
        let (var_x, cov, var_v) = uld_noise_covariance(delta, gamma);
        let l_vv = var_v.sqrt();
        let l_xv = cov / l_vv;
        let resid = var_x - l_xv * l_xv;
        if resid < -1e-12 * var_x.max(f64::MIN_POSITIVE) {
            return Err(SamplerError::DegenerateNoiseCovariance(format!(
                "underdamped block at delta = {delta}, gamma = {gamma}"
            )));
        }
        Ok(Self { delta, gamma, l_vv, l_xv, l_xx: resid.max(0.0).sqrt() })
    }

    pub fn sample_into(&self, rng: &mut RngStream, zeta_x: &mut [f64], zeta_v: &mut [f64]) {
        for (zx, zv) in zeta_x.iter_mut().zip(zeta_v.iter_mut()) {
            let g1 = rng.normal();
            let g2 = rng.normal();
            *zv = self.l_vv * g1;
            *zx = self.l_xv * g1 + self.l_xx * g2;
        }
    }

    pub fn sample(&self, rng: &mut RngStream, d: usize) -> UldNoiseBlock {
        let mut zeta_x = vec![0.0; d];
        let mut zeta_v = vec![0.0; d];
        self.sample_into(rng, &mut zeta_x, &mut zeta_v);
        UldNoiseBlock { zeta_x, zeta_v, step: self.delta, gamma: self.gamma }
    }
}

pub fn sample_uld_noise(rng: &mut RngStream, delta: f64, gamma: f64, d: usize) -> Result<UldNoiseBlock> {
    Ok(UldNoiseLaw::new(delta, gamma)?.sample(rng, d))
}

/// Joint 3x3 covariance (row-major) of the three stochastic integrals used by
/// one randomized-midpoint underdamped step with friction 2:
///
/// * `W1 = sqrt(u) ∫_0^{αh} (1 - e^{-2(αh - s)}) dB_s`
/// * `W2 = sqrt(u) ∫_0^{h} (1 - e^{-2(h - s)}) dB_s`
/// * `W3 = 2 sqrt(u) ∫_0^{h} e^{-2(h - s)} dB_s`
pub fn shenlee_noise_covariance(alpha: f64, h: f64, u: f64) -> [[f64; 3]; 3] {
    let a = alpha * h;
    let c = (-2.0 * (h - a)).exp();
    let one_minus_c = -(-2.0 * (h - a)).exp_m1();

    let v1 = int_one_minus_exp_sq(2.0, a);
    let v2 = int_one_minus_exp_sq(2.0, h);
    let v3 = -(-4.0 * h).exp_m1() / 4.0;
    let c12 = v1 + one_minus_c * int_one_minus_exp_times_exp(2.0, a);
    let c13 = c * int_one_minus_exp_times_exp(2.0, a);
    let c23 = int_one_minus_exp_times_exp(2.0, h);

    let s = [u.sqrt(), u.sqrt(), 2.0 * u.sqrt()];
    let raw = [[v1, c12, c13], [c12, v2, c23], [c13, c23, v3]];
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = s[i] * s[j] * raw[i][j];
        }
    }
    out
}

/// Pre-scaled noise triple for one randomized-midpoint underdamped step.
#[derive(Debug, Clone, PartialEq)]
pub struct ShenLeeNoiseBlock {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub w3: Vec<f64>,
    pub alpha: f64,
    pub h: f64,
}

/// Factored noise law for a fixed `(alpha, h, u)`; reused across coordinates.
#[derive(Debug, Clone, Copy)]
pub struct ShenLeeNoiseLaw {
    pub alpha: f64,
    pub h: f64,
    pub u: f64,
    // Lower-triangular factor in the order (W3, W2, W1) so a vanishing W1 stays exactly zero.
    l: [[f64; 3]; 3],
}

impl ShenLeeNoiseLaw {
    pub fn new(alpha: f64, h: f64, u: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) || !(h > 0.0) || !(u > 0.0) {
            return Err(SamplerError::InvalidParameter(format!(
                "noise law needs 0 <= alpha <= 1, h > 0, u > 0; got alpha = {alpha}, h = {h}, u = {u}"
            )));
        }
        let cov = shenlee_noise_covariance(alpha, h, u);
        // permute to (W3, W2, W1)
        let p = [2usize, 1, 0];
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = cov[p[i]][p[j]];
            }
        }
        let scale = m[0][0].max(m[1][1]).max(m[2][2]);
        let mut l = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..=i {
                let mut s = m[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k];
                }
                if i == j {
                    if s < -1e-12 * scale {
                        return Err(SamplerError::DegenerateNoiseCovariance(format!(
                            "randomized-midpoint block at alpha = {alpha}, h = {h}, u = {u}"
                        )));
                    }
                    l[i][i] = if s <= 1e-300 { 0.0 } else { s.sqrt() };
                } else {
                    l[i][j] = if l[j][j] > 0.0 { s / l[j][j] } else { 0.0 };
                }
            }
        }
        Ok(Self { alpha, h, u, l })
    }

    pub fn sample_into(&self, rng: &mut RngStream, w1: &mut [f64], w2: &mut [f64], w3: &mut [f64]) {
        let l = &self.l;
        for k in 0..w1.len() {
            let g0 = rng.normal();
            let g1 = rng.normal();
            let g2 = rng.normal();
            w3[k] = l[0][0] * g0;
            w2[k] = l[1][0] * g0 + l[1][1] * g1;
            w1[k] = l[2][0] * g0 + l[2][1] * g1 + l[2][2] * g2;
        }
    }

    pub fn sample(&self, rng: &mut RngStream, d: usize) -> ShenLeeNoiseBlock {
        let (mut w1, mut w2, mut w3) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        self.sample_into(rng, &mut w1, &mut w2, &mut w3);
        ShenLeeNoiseBlock { w1, w2, w3, alpha: self.alpha, h: self.h }
    }
}

pub fn sample_shenlee_noise(rng: &mut RngStream, alpha: f64, h: f64, u: f64, d: usize) -> Result<ShenLeeNoiseBlock> {
    Ok(ShenLeeNoiseLaw::new(alpha, h, u)?.sample(rng, d))
}
