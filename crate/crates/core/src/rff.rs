//! Random Fourier features for the Gaussian kernel.
//!
//! Frequencies are drawn i.i.d. from `N(0, I / sigma2)`. The feature map is
//!
//! ```text
//! phi(x) = r^(-1/2) [cos(w_1.x), sin(w_1.x), ..., cos(w_r.x), sin(w_r.x)]
//! ```
//!
//! with cos/sin interleaved per frequency, so `phi(x).phi(y)` estimates
//! `exp(-|x - y|^2 / (2 sigma2))` and every feature vector has unit norm.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{invalid, FincError, Result};
use crate::rng::Stream;
use crate::tensor_io::EmbeddingSet;

pub const BASIS_MAGIC: &[u8; 4] = b"FNCB";
pub const BASIS_VERSION: u32 = 1;
const BASIS_HEADER_LEN: usize = 4 + 4 + 8 + 8 + 8 + 8;

/// Stream id reserved for frequency draws.
const BASIS_STREAM: u64 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct FourierBasis {
    /// `r x d` frequency matrix, one frequency per row.
    omega: DMatrix<f64>,
    sigma2: f64,
    seed: u64,
}

/// A `2r` feature vector `phi(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Wraps raw values; no normalization is applied.
    pub fn from_values(values: Vec<f64>) -> Self {
        FeatureVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Draws `r` frequencies for `d`-dimensional inputs.
///
/// Normal draws are consumed in row-major order: all `d` coordinates of the
/// first frequency, then the second, and so on.
pub fn sample_basis(d: usize, r: usize, sigma2: f64, seed: u64) -> Result<FourierBasis> {
    if d == 0 || r == 0 {
        return Err(invalid(format!("basis needs d >= 1 and r >= 1, got d={d}, r={r}")));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(invalid(format!("sigma2 must be positive and finite, got {sigma2}")));
    }
    let scale = 1.0 / sigma2.sqrt();
    let mut stream = Stream::new(seed, BASIS_STREAM);
    let mut omega = DMatrix::zeros(r, d);
    for i in 0..r {
        for j in 0..d {
            omega[(i, j)] = stream.normal() * scale;
        }
    }
    Ok(FourierBasis { omega, sigma2, seed })
}

impl FourierBasis {
    /// Builds a basis from explicit frequencies (used for persisted bases and tests).
    pub fn from_omega(omega: DMatrix<f64>, sigma2: f64, seed: u64) -> Result<Self> {
        if omega.nrows() == 0 || omega.ncols() == 0 {
            return Err(invalid("frequency matrix must be non-empty"));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(invalid(format!("sigma2 must be positive and finite, got {sigma2}")));
        }
        if omega.iter().any(|v| !v.is_finite()) {
            return Err(FincError::Format("non-finite frequency".into()));
        }
        Ok(FourierBasis { omega, sigma2, seed })
    }

    pub fn r(&self) -> usize {
        self.omega.nrows()
    }

    pub fn d(&self) -> usize {
        self.omega.ncols()
    }

    /// Length of a feature vector, `2r`.
    pub fn feature_dim(&self) -> usize {
        2 * self.r()
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.d() {
            return Err(FincError::DimensionMismatch {
                expected: self.d(),
                found: len,
            });
        }
        Ok(())
    }

    pub fn feature_map(&self, x: &[f64]) -> Result<FeatureVector> {
        self.check_dim(x.len())?;
        let r = self.r();
        let scale = 1.0 / (r as f64).sqrt();
        let mut out = Vec::with_capacity(2 * r);
        for i in 0..r {
            let mut phase = 0.0;
            for (j, &xj) in x.iter().enumerate() {
                phase += self.omega[(i, j)] * xj;
            }
            let (s, c) = phase.sin_cos();
            out.push(c * scale);
            out.push(s * scale);
        }
        Ok(FeatureVector(out))
    }

    pub fn feature_map_f32(&self, x: &[f32]) -> Result<FeatureVector> {
        let widened: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        self.feature_map(&widened)
    }

    /// `phi(x) . phi(y)`, the RFF estimate of the Gaussian kernel.
    pub fn kernel_estimate(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_dim(y.len())?;
        let fx = self.feature_map(x)?;
        let fy = self.feature_map(y)?;
        Ok(fx.dot(fy.values()))
    }

    /// Feature matrix for rows `start..end` of `set`: `2r x (end - start)`,
    /// one sample per column.
    ///
    /// Phases come from a single matrix product, so columns can differ from
    /// [`FourierBasis::feature_map`] in the last few bits.
    pub fn feature_block(&self, set: &EmbeddingSet, start: usize, end: usize) -> Result<DMatrix<f64>> {
        self.check_dim(set.d())?;
        assert!(start <= end && end <= set.n());
        let b = end - start;
        let d = self.d();
        let r = self.r();
        let inputs = DMatrix::from_fn(d, b, |j, k| set.row(start + k)[j] as f64);
        let mut phases = DMatrix::zeros(r, b);
        phases.gemm(1.0, &self.omega, &inputs, 0.0);
        let scale = 1.0 / (r as f64).sqrt();
        let mut out = DMatrix::zeros(2 * r, b);
        for k in 0..b {
            let src = phases.column(k);
            let mut dst = out.column_mut(k);
            for i in 0..r {
                let (s, c) = src[i].sin_cos();
                dst[2 * i] = c * scale;
                dst[2 * i + 1] = s * scale;
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BASIS_HEADER_LEN + 8 * self.omega.len());
        out.extend_from_slice(BASIS_MAGIC);
        out.extend_from_slice(&BASIS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.r() as u64).to_le_bytes());
        out.extend_from_slice(&(self.d() as u64).to_le_bytes());
        out.extend_from_slice(&self.sigma2.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for i in 0..self.r() {
            for j in 0..self.d() {
                out.extend_from_slice(&self.omega[(i, j)].to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < BASIS_HEADER_LEN || &bytes[0..4] != BASIS_MAGIC {
            return Err(FincError::Format("not a basis file (expected FNCB header)".into()));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != BASIS_VERSION {
            return Err(FincError::Format(format!("unsupported basis version {version}")));
        }
        let r = u64_at(8) as usize;
        let d = u64_at(16) as usize;
        let sigma2 = f64::from_bits(u64_at(24));
        let seed = u64_at(32);
        let payload = &bytes[BASIS_HEADER_LEN..];
        if r.checked_mul(d).and_then(|v| v.checked_mul(8)) != Some(payload.len()) {
            return Err(FincError::Format(format!(
                "basis header declares {r}x{d} frequencies, payload has {} bytes",
                payload.len()
            )));
        }
        let vals = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let omega = DMatrix::from_row_iterator(r, d, vals);
        FourierBasis::from_omega(omega, sigma2, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| FincError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| FincError::io(path, e))?;
        FourierBasis::from_bytes(&bytes)
    }
}
