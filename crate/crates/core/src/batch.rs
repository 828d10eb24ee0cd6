//! Row-major particle batches.

use crate::error::{Result, SamplerError};

/// Number of particles handled by one unit of parallel work.
///
/// Random streams are keyed by chunk index, so this constant (and not the
/// number of worker threads) determines the random draws each particle sees.
pub const CHUNK_ROWS: usize = 256;

/// Largest absolute coordinate tolerated before a run is declared unstable.
pub const BLOW_UP_THRESHOLD: f64 = 1e8;

/// A batch of `len()` particles in `dim()` dimensions, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    dim: usize,
    data: Vec<f64>,
}

impl Batch {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(SamplerError::InvalidParameter("dimension must be positive".into()));
        }
        if data.len() % dim != 0 {
            return Err(SamplerError::InvalidParameter(format!(
                "buffer of length {} is not a whole number of {}-dimensional rows",
                data.len(),
                dim
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self { dim, data: vec![0.0; n * dim] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(SamplerError::DimensionMismatch { expected: dim, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Coordinate `j` of every particle.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Unbiased sample covariance, row-major `dim x dim`.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mean = self.mean();
        let mut c = vec![0.0; d * d];
        let mut centered = vec![0.0; d];
        for r in self.rows() {
            for k in 0..d {
                centered[k] = r[k] - mean[k];
            }
            for a in 0..d {
                for b in a..d {
                    c[a * d + b] += centered[a] * centered[b];
                }
            }
        }
        let denom = (self.len().max(2) - 1) as f64;
        for a in 0..d {
            for b in a..d {
                let v = c[a * d + b] / denom;
                c[a * d + b] = v;
                c[b * d + a] = v;
            }
        }
        c
    }

    /// Checks that every entry is finite and below [`BLOW_UP_THRESHOLD`].
    pub fn is_stable(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && v.abs() <= BLOW_UP_THRESHOLD)
    }

    /// Little-endian float64 rows, the on-disk sample format.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8], dim: usize) -> Result<Self> {
        if bytes.len() % 8 != 0 {
            return Err(SamplerError::InvalidParameter("byte length is not a multiple of 8".into()));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::new(dim, data)
    }
}

/// Runs `f(chunk_index, rows)` over consecutive `CHUNK_ROWS`-particle slices of
/// a row-major buffer, in parallel on the current rayon pool.
pub(crate) fn for_each_chunk<F>(data: &mut [f64], dim: usize, f: F) -> Result<()>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync + Send,
{
    use rayon::prelude::*;
    data.par_chunks_mut(CHUNK_ROWS * dim).enumerate().try_for_each(|(c, rows)| f(c, rows))
}

pub(crate) fn row_is_stable(row: &[f64]) -> bool {
    row.iter().all(|v| v.is_finite() && v.abs() <= BLOW_UP_THRESHOLD)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_of_known_rows() {
        let b = Batch::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 10.0]]).unwrap();
        assert_eq!(b.mean(), vec![3.0, 6.0]);
        let c = b.covariance();
        assert!((c[0] - 4.0).abs() < 1e-12);
        assert!((c[1] - 8.0).abs() < 1e-12);
        assert!((c[3] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_ragged_buffers() {
        assert!(Batch::new(3, vec![0.0; 7]).is_err());
        assert!(Batch::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn byte_layout_is_little_endian_rows() {
        let b = Batch::from_rows(&[vec![1.0, -2.5]]).unwrap();
        let bytes = b.to_le_bytes();
        assert_eq!(&bytes[..8], &1.0f64.to_le_bytes());
        assert_eq!(Batch::from_le_bytes(&bytes, 2).unwrap(), b);
    }

    #[test]
    fn stability_flags_large_and_nan() {
        let mut b = Batch::zeros(2, 2);
        assert!(b.is_stable());
        b.row_mut(1)[0] = 2e8;
        assert!(!b.is_stable());
        b.row_mut(1)[0] = f64::NAN;
        assert!(!b.is_stable());
    }
}
