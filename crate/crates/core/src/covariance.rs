//! Streaming kernel covariance in random-feature space.
//!
//! [`CovarianceAccumulator`] keeps the raw sum of feature outer products and
//! the sample count; dividing by the count is deferred to [`finalize`]. Only
//! the upper triangle is stored, as a list of square tiles `(bi, bj)` with
//! `bi <= bj`. A batch update adds `F[bi] F[bj]^T` into each tile, and tiles
//! are independent, so they are updated in parallel without changing a single
//! bit of the result: each tile sees the same sequence of additions no matter
//! how many worker threads the current rayon pool has.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{invalid, FincError, Result};
use crate::rff::{FeatureVector, FourierBasis};
use crate::tensor_io::EmbeddingSet;

pub const ACCUMULATOR_MAGIC: &[u8; 4] = b"FNCA";
pub const ACCUMULATOR_VERSION: u32 = 1;

pub const DEFAULT_TILE: usize = 256;
/// Samples featurized per batch update.
pub const DEFAULT_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceAccumulator {
    dim: usize,
    tile: usize,
    /// Upper-triangular tile pairs in row-major order.
    pairs: Vec<(usize, usize)>,
    tiles: Vec<DMatrix<f64>>,
    count: u64,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        Self::with_tile(dim, DEFAULT_TILE)
    }

    pub fn with_tile(dim: usize, tile: usize) -> Self {
        assert!(dim > 0 && tile > 0);
        let blocks = dim.div_ceil(tile);
        let mut pairs = Vec::with_capacity(blocks * (blocks + 1) / 2);
        let mut tiles = Vec::with_capacity(pairs.capacity());
        for bi in 0..blocks {
            for bj in bi..blocks {
                pairs.push((bi, bj));
                tiles.push(DMatrix::zeros(block_len(dim, tile, bi), block_len(dim, tile, bj)));
            }
        }
        CovarianceAccumulator {
            dim,
            tile,
            pairs,
            tiles,
            count: 0,
        }
    }

    /// Accumulator sized for `basis`.
    pub fn for_basis(basis: &FourierBasis) -> Self {
        Self::new(basis.feature_dim())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Bytes held by the tile storage.
    pub fn footprint_bytes(&self) -> usize {
        self.tiles.iter().map(|t| t.len() * std::mem::size_of::<f64>()).sum()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(FincError::DimensionMismatch {
                expected: self.dim,
                found: len,
            });
        }
        Ok(())
    }

    /// Rank-one update `sum += phi phi^T`.
    pub fn accumulate(&mut self, phi: &FeatureVector) -> Result<()> {
        self.check_len(phi.len())?;
        let v = phi.values();
        let tile = self.tile;
        for (&(bi, bj), t) in self.pairs.iter().zip(self.tiles.iter_mut()) {
            let (r0, c0) = (bi * tile, bj * tile);
            for c in 0..t.ncols() {
                let vc = v[c0 + c];
                let mut col = t.column_mut(c);
                for r in 0..col.len() {
                    col[r] += v[r0 + r] * vc;
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Adds `F F^T` for a `dim x b` feature block (one sample per column).
    pub fn accumulate_block(&mut self, block: &DMatrix<f64>) -> Result<()> {
        self.check_len(block.nrows())?;
        if block.ncols() == 0 {
            return Ok(());
        }
        let transposed = block.transpose();
        let tile = self.tile;
        self.pairs
            .par_iter()
            .zip(self.tiles.par_iter_mut())
            .for_each(|(&(bi, bj), t)| {
                let left = block.rows(bi * tile, t.nrows());
                let right = transposed.columns(bj * tile, t.ncols());
                t.gemm(1.0, &left, &right, 1.0);
            });
        self.count += block.ncols() as u64;
        Ok(())
    }

    /// Streams every row of `set` through `basis`, `chunk` samples at a time.
    pub fn accumulate_set(&mut self, basis: &FourierBasis, set: &EmbeddingSet, chunk: usize) -> Result<()> {
        self.check_len(basis.feature_dim())?;
        if chunk == 0 {
            return Err(invalid("chunk size must be positive"));
        }
        let mut start = 0;
        while start < set.n() {
            let end = (start + chunk).min(set.n());
            let block = basis.feature_block(set, start, end)?;
            self.accumulate_block(&block)?;
            start = end;
        }
        Ok(())
    }

    /// Adds another accumulator's sums and count into this one.
    pub fn merge(&mut self, other: &CovarianceAccumulator) -> Result<()> {
        self.check_len(other.dim)?;
        if self.tile != other.tile {
            return Err(invalid(format!(
                "cannot merge accumulators with tile sizes {} and {}",
                self.tile, other.tile
            )));
        }
        for (a, b) in self.tiles.iter_mut().zip(&other.tiles) {
            *a += b;
        }
        self.count += other.count;
        Ok(())
    }

    /// The full symmetric sum, mirrored from the upper triangle.
    pub fn sum_matrix(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        let tile = self.tile;
        for (&(bi, bj), t) in self.pairs.iter().zip(&self.tiles) {
            let (r0, c0) = (bi * tile, bj * tile);
            for c in 0..t.ncols() {
                for r in 0..t.nrows() {
                    let (i, j) = (r0 + r, c0 + c);
                    if i <= j {
                        out[(i, j)] = t[(r, c)];
                        out[(j, i)] = t[(r, c)];
                    }
                }
            }
        }
        out
    }

    /// `sum / count`, the empirical covariance `C`.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if self.count == 0 {
            return Err(invalid("covariance of an empty accumulator"));
        }
        Ok(self.sum_matrix() / self.count as f64)
    }

    /// Checkpoint: "FNCA", u32 version, u64 dim, u64 count, u64 tile, then the
    /// full mirrored sum as `dim * dim` little-endian f64, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let sum = self.sum_matrix();
        let mut out = Vec::with_capacity(32 + 8 * sum.len());
        out.extend_from_slice(ACCUMULATOR_MAGIC);
        out.extend_from_slice(&ACCUMULATOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&(self.tile as u64).to_le_bytes());
        for i in 0..self.dim {
            for j in 0..self.dim {
                out.extend_from_slice(&sum[(i, j)].to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 || &bytes[0..4] != ACCUMULATOR_MAGIC {
            return Err(FincError::Format("not an accumulator checkpoint (expected FNCA header)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != ACCUMULATOR_VERSION {
            return Err(FincError::Format(format!("unsupported checkpoint version {version}")));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let dim = u64_at(8) as usize;
        let count = u64_at(16);
        let tile = u64_at(24) as usize;
        let payload = &bytes[32..];
        if dim == 0 || tile == 0 || dim.checked_mul(dim).and_then(|v| v.checked_mul(8)) != Some(payload.len()) {
            return Err(FincError::Format(format!(
                "checkpoint header declares dim {dim}, payload has {} bytes",
                payload.len()
            )));
        }
        let value = |i: usize, j: usize| {
            let o = 8 * (i * dim + j);
            f64::from_le_bytes(payload[o..o + 8].try_into().unwrap())
        };
        let mut acc = CovarianceAccumulator::with_tile(dim, tile);
        for (&(bi, bj), t) in acc.pairs.iter().zip(acc.tiles.iter_mut()) {
            let (r0, c0) = (bi * tile, bj * tile);
            for c in 0..t.ncols() {
                for r in 0..t.nrows() {
                    t[(r, c)] = value(r0 + r, c0 + c);
                }
            }
        }
        acc.count = count;
        Ok(acc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| FincError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| FincError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn block_len(dim: usize, tile: usize, b: usize) -> usize {
    tile.min(dim - b * tile)
}

/// The conditional covariance `C_X - rho C_Y` in feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalCovariance {
    matrix: DMatrix<f64>,
    rho: f64,
    n: u64,
    m: u64,
}

impl ConditionalCovariance {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn m(&self) -> u64 {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }
}

pub(crate) fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(invalid(format!("rho must be positive and finite, got {rho}")));
    }
    Ok(())
}

/// `Lambda = sum_X / n - rho sum_Y / m`.
pub fn finalize(acc_x: &CovarianceAccumulator, acc_y: &CovarianceAccumulator, rho: f64) -> Result<ConditionalCovariance> {
    check_rho(rho)?;
    if acc_x.count == 0 || acc_y.count == 0 {
        return Err(invalid(format!(
            "both accumulators need samples (test {}, reference {})",
            acc_x.count, acc_y.count
        )));
    }
    acc_x.check_len(acc_y.dim)?;
    let wx = 1.0 / acc_x.count as f64;
    let wy = rho / acc_y.count as f64;
    let sx = acc_x.sum_matrix();
    let sy = acc_y.sum_matrix();
    let matrix = sx * wx - sy * wy;
    Ok(ConditionalCovariance {
        matrix,
        rho,
        n: acc_x.count,
        m: acc_y.count,
    })
}

/// Featurizes and accumulates both sets, then finalizes.
pub fn conditional_covariance(
    basis: &FourierBasis,
    test: &EmbeddingSet,
    reference: &EmbeddingSet,
    rho: f64,
    chunk: usize,
) -> Result<ConditionalCovariance> {
    let mut acc_x = CovarianceAccumulator::for_basis(basis);
    acc_x.accumulate_set(basis, test, chunk)?;
    let mut acc_y = CovarianceAccumulator::for_basis(basis);
    acc_y.accumulate_set(basis, reference, chunk)?;
    finalize(&acc_x, &acc_y, rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rff::sample_basis;
    use crate::rng::Stream;

    fn gaussian_set(n: usize, d: usize, seed: u64) -> EmbeddingSet {
        let mut s = Stream::new(seed, 0);
        let data = (0..n * d).map(|_| s.normal() as f32).collect();
        EmbeddingSet::new(n, d, data).unwrap()
    }

    fn make_feature(v: Vec<f64>) -> FeatureVector {
        FeatureVector::from_values(v)
    }

    fn basis_vector(dim: usize, k: usize) -> FeatureVector {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        make_feature(v)
    }

    #[test]
    fn single_unit_update() {
        let mut acc = CovarianceAccumulator::with_tile(6, 4);
        acc.accumulate(&basis_vector(6, 0)).unwrap();
        let sum = acc.sum_matrix();
        assert_eq!(sum[(0, 0)], 1.0);
        assert_eq!(sum.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(acc.count(), 1);
    }

    #[test]
    fn single_update_has_unit_trace() {
        let basis = sample_basis(3, 20, 1.0, 1).unwrap();
        let mut acc = CovarianceAccumulator::for_basis(&basis);
        acc.accumulate(&basis.feature_map(&[0.1, 0.2, -3.0]).unwrap()).unwrap();
        assert!((acc.sum_matrix().trace() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut acc = CovarianceAccumulator::new(10);
        assert!(acc.accumulate(&make_feature(vec![0.0; 8])).is_err());
        assert!(acc.accumulate_block(&DMatrix::zeros(8, 3)).is_err());
        let other = CovarianceAccumulator::new(12);
        assert!(acc.merge(&other).is_err());
    }

    #[test]
    fn streamed_equals_batch_mean() {
        let basis = sample_basis(4, 37, 1.5, 3).unwrap();
        let set = gaussian_set(500, 4, 5);
        let mut acc = CovarianceAccumulator::with_tile(basis.feature_dim(), 16);
        let mut dense = DMatrix::zeros(74, 74);
        for i in 0..set.n() {
            let phi = basis.feature_map_f32(set.row(i)).unwrap();
            let v = nalgebra::DVector::from_column_slice(phi.values());
            dense += &v * v.transpose();
            acc.accumulate(&phi).unwrap();
        }
        dense /= set.n() as f64;
        assert!((acc.covariance().unwrap() - dense).amax() < 1e-10);
    }

    #[test]
    fn block_updates_match_rank_one_updates() {
        let basis = sample_basis(3, 50, 1.0, 9).unwrap();
        let set = gaussian_set(300, 3, 6);
        let mut by_block = CovarianceAccumulator::with_tile(100, 32);
        by_block.accumulate_set(&basis, &set, 64).unwrap();
        let mut by_row = CovarianceAccumulator::with_tile(100, 32);
        for i in 0..set.n() {
            by_row.accumulate(&basis.feature_map_f32(set.row(i)).unwrap()).unwrap();
        }
        assert_eq!(by_block.count(), 300);
        assert!((by_block.sum_matrix() - by_row.sum_matrix()).amax() < 1e-10);
    }

    #[test]
    fn sum_is_symmetric() {
        let basis = sample_basis(2, 45, 1.0, 2).unwrap();
        let set = gaussian_set(77, 2, 1);
        let mut acc = CovarianceAccumulator::with_tile(90, 20);
        acc.accumulate_set(&basis, &set, 10).unwrap();
        let s = acc.sum_matrix();
        assert!((&s - s.transpose()).amax() <= 1e-12);
    }

    #[test]
    fn chunked_merge_matches_single_pass() {
        let basis = sample_basis(5, 60, 2.0, 4).unwrap();
        let set = gaussian_set(400, 5, 8);
        let mut single = CovarianceAccumulator::new(120);
        single.accumulate_set(&basis, &set, 100).unwrap();
        let mut merged = CovarianceAccumulator::new(120);
        for c in 0..4 {
            let part = set.select(&(c * 100..(c + 1) * 100).collect::<Vec<_>>()).unwrap();
            let mut acc = CovarianceAccumulator::new(120);
            acc.accumulate_set(&basis, &part, 100).unwrap();
            merged.merge(&acc).unwrap();
        }
        assert_eq!(merged.count(), 400);
        assert!((merged.sum_matrix() - single.sum_matrix()).amax() < 1e-12);
    }

    #[test]
    fn order_invariance() {
        let basis = sample_basis(3, 40, 1.0, 12).unwrap();
        let set = gaussian_set(200, 3, 13);
        let mut perm: Vec<usize> = (0..200).collect();
        let mut s = Stream::new(14, 0);
        for i in (1..perm.len()).rev() {
            perm.swap(i, s.below(i as u64 + 1) as usize);
        }
        let shuffled = set.select(&perm).unwrap();
        let mut a = CovarianceAccumulator::new(80);
        a.accumulate_set(&basis, &set, 32).unwrap();
        let mut b = CovarianceAccumulator::new(80);
        b.accumulate_set(&basis, &shuffled, 32).unwrap();
        assert!((a.covariance().unwrap() - b.covariance().unwrap()).amax() < 1e-10);
    }

    #[test]
    fn self_difference_cancels() {
        let basis = sample_basis(3, 30, 1.0, 1).unwrap();
        let set = gaussian_set(120, 3, 2);
        let cond = conditional_covariance(&basis, &set, &set, 1.0, 50).unwrap();
        assert!(cond.matrix().amax() < 1e-10);
    }

    #[test]
    fn traces_follow_rho() {
        let basis = sample_basis(3, 30, 1.0, 1).unwrap();
        let x = gaussian_set(90, 3, 2);
        let y = gaussian_set(70, 3, 3);
        for rho in [0.5, 1.0, 2.0, 10.0] {
            let cond = conditional_covariance(&basis, &x, &y, rho, 32).unwrap();
            assert!((cond.trace() - (1.0 - rho)).abs() < 1e-9);
            assert_eq!((cond.n(), cond.m()), (90, 70));
        }
    }

    #[test]
    fn covariance_eigenvalues_in_unit_interval() {
        let basis = sample_basis(2, 40, 0.5, 3).unwrap();
        let set = gaussian_set(150, 2, 4);
        let mut acc = CovarianceAccumulator::for_basis(&basis);
        acc.accumulate_set(&basis, &set, 64).unwrap();
        let (vals, _) = crate::linalg::symmetric_eigen(&acc.covariance().unwrap()).unwrap();
        assert!(vals.iter().all(|&v| (-1e-9..=1.0 + 1e-9).contains(&v)));
        assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dense_formula_oracle() {
        let basis = sample_basis(4, 25, 1.0, 30).unwrap();
        let x = gaussian_set(300, 4, 31);
        let y = gaussian_set(300, 4, 32);
        let rho = 1.5;
        let cond = conditional_covariance(&basis, &x, &y, rho, 128).unwrap();
        let outer_mean = |set: &EmbeddingSet| {
            let mut c = DMatrix::zeros(50, 50);
            for i in 0..set.n() {
                let phi = basis.feature_map_f32(set.row(i)).unwrap();
                for a in 0..50 {
                    for b in 0..50 {
                        c[(a, b)] += phi.values()[a] * phi.values()[b];
                    }
                }
            }
            c / set.n() as f64
        };
        let expected = outer_mean(&x) - outer_mean(&y) * rho;
        assert!((cond.matrix() - expected).amax() < 1e-10);
    }

    #[test]
    fn finalize_errors() {
        let a = CovarianceAccumulator::new(4);
        let mut b = CovarianceAccumulator::new(4);
        b.accumulate(&make_feature(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(finalize(&a, &b, 1.0).is_err());
        assert!(finalize(&b, &b, 0.0).is_err());
        let mut c = CovarianceAccumulator::new(6);
        c.accumulate(&make_feature(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(finalize(&b, &c, 1.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let basis = sample_basis(2, 20, 1.0, 3).unwrap();
        let set = gaussian_set(50, 2, 4);
        let mut acc = CovarianceAccumulator::with_tile(40, 16);
        acc.accumulate_set(&basis, &set, 16).unwrap();
        let back = CovarianceAccumulator::from_bytes(&acc.to_bytes()).unwrap();
        assert_eq!(back.count(), acc.count());
        assert_eq!(back.sum_matrix(), acc.sum_matrix());
        assert!(CovarianceAccumulator::from_bytes(&acc.to_bytes()[..100]).is_err());
    }

    #[test]
    fn footprint_depends_only_on_dimension() {
        let a = CovarianceAccumulator::new(1000);
        assert!(a.footprint_bytes() >= 1000 * 1001 / 2 * 8);
        assert!(a.footprint_bytes() <= 1000 * 1000 * 8);
    }
}
