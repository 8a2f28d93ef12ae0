//! Bandwidth and feature-count selection.
//!
//! **Bandwidth.** For each candidate `sigma` the statistic is the population
//! variance of off-diagonal Gaussian kernel values `k(x_i, x_j)` over a fixed
//! subsample of at most [`MAX_PAIRS`] index pairs. The statistic is close to
//! zero at both ends of the scale (all kernel values near 0 for tiny `sigma`,
//! near 1 for huge `sigma`) and peaks in between. The trivial small-`sigma`
//! side carries no information, so the selected bandwidth is the smallest
//! grid point *at or after the peak* of the curve whose statistic is at most
//! the target.
//!
//! **Feature count.** For each candidate `r`, two bases are drawn from
//! `seed` and `seed + 1` and the top eigenvalues of both FINC spectra are
//! compared: `max_i |l1_i - l2_i| / max(|l1_1|, floor)`. The smallest `r` with
//! discrepancy below [`FEATURE_TOLERANCE`] is selected.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::oracle::gaussian_kernel;
use crate::rff::sample_basis;
use crate::rng::Stream;
use crate::spectral::finc_spectrum_auto;
use crate::tensor_io::EmbeddingSet;

pub const MAX_PAIRS: usize = 2000;
pub const DEFAULT_VARIANCE_TARGET: f64 = 0.01;
pub const FEATURE_TOLERANCE: f64 = 0.01;
pub const DISCREPANCY_FLOOR: f64 = 1e-6;
pub const DEFAULT_TOP_EIGENVALUES: usize = 10;
pub const MEDIAN_SUBSAMPLE: usize = 1000;
pub const DEFAULT_GRID_POINTS: usize = 20;
pub const DEFAULT_FEATURE_CANDIDATES: [usize; 3] = [1000, 2000, 4000];

const PAIR_STREAM: u64 = 0x7061_6972;
const MEDIAN_STREAM: u64 = 0x6d65_6469;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandwidthSelection {
    pub sigma: f64,
    pub sigma2: f64,
    /// `(sigma, variance of off-diagonal kernel values)` per grid point.
    pub variance_curve: Vec<(f64, f64)>,
    pub target: f64,
    /// False when no grid point at or after the peak met the target; the
    /// largest grid point is returned in that case.
    pub converged: bool,
    /// Grid indices after the peak where the statistic increased.
    pub monotonicity_violations: Vec<usize>,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureCountSelection {
    pub r: usize,
    /// `(r, split-seed relative discrepancy)` per candidate.
    pub error_curve: Vec<(usize, f64)>,
    pub tolerance: f64,
    /// False when every candidate's discrepancy was at least the tolerance;
    /// the largest candidate is returned in that case.
    pub converged: bool,
    pub top: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuningResult {
    pub sigma2: f64,
    pub r: usize,
    pub bandwidth: BandwidthSelection,
    pub features: FeatureCountSelection,
}

/// Index pairs `(i, j)`, `i < j`: all of them when there are at most
/// [`MAX_PAIRS`], otherwise [`MAX_PAIRS`] draws from the seeded stream.
pub fn sample_pairs(n: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = n * n.saturating_sub(1) / 2;
    if total <= MAX_PAIRS {
        return (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    }
    let mut s = Stream::new(seed, PAIR_STREAM);
    (0..MAX_PAIRS)
        .map(|_| {
            let i = s.below(n as u64) as usize;
            let mut j = s.below(n as u64 - 1) as usize;
            if j >= i {
                j += 1;
            }
            (i.min(j), i.max(j))
        })
        .collect()
}

/// Population variance of off-diagonal kernel values over `pairs`.
pub fn kernel_variance(sample: &EmbeddingSet, pairs: &[(usize, usize)], sigma: f64) -> f64 {
    let sigma2 = sigma * sigma;
    let values: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| gaussian_kernel(&sample.row_f64(i), &sample.row_f64(j), sigma2))
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64
}

/// Median pairwise Euclidean distance over a seeded subsample of at most
/// [`MEDIAN_SUBSAMPLE`] points.
pub fn median_distance(sample: &EmbeddingSet, seed: u64) -> f64 {
    let n = sample.n();
    let mut idx: Vec<usize> = (0..n).collect();
    if n > MEDIAN_SUBSAMPLE {
        let mut s = Stream::new(seed, MEDIAN_STREAM);
        for k in 0..MEDIAN_SUBSAMPLE {
            let pick = k + s.below((n - k) as u64) as usize;
            idx.swap(k, pick);
        }
        idx.truncate(MEDIAN_SUBSAMPLE);
        idx.sort_unstable();
    }
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| sample.row_f64(i)).collect();
    let mut dists = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            let d2: f64 = rows[a].iter().zip(&rows[b]).map(|(p, q)| (p - q) * (p - q)).sum();
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    }
}

/// Geometric grid of [`DEFAULT_GRID_POINTS`] values over
/// `[0.1 med, 100 med]`; a zero median (all points identical) falls back to 1.
pub fn default_sigma_grid(sample: &EmbeddingSet, seed: u64) -> Vec<f64> {
    let med = median_distance(sample, seed);
    let med = if med > 0.0 && med.is_finite() { med } else { 1.0 };
    let (lo, hi) = ((0.1 * med).ln(), (100.0 * med).ln());
    let steps = (DEFAULT_GRID_POINTS - 1) as f64;
    (0..DEFAULT_GRID_POINTS)
        .map(|k| (lo + (hi - lo) * k as f64 / steps).exp())
        .collect()
}

pub fn select_bandwidth(sample: &EmbeddingSet, grid: &[f64], target: f64, seed: u64) -> Result<BandwidthSelection> {
    if grid.is_empty() {
        return Err(invalid("bandwidth grid is empty"));
    }
    if sample.n() < 2 {
        return Err(invalid(format!("bandwidth selection needs at least 2 samples, got {}", sample.n())));
    }
    if grid.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(invalid("bandwidth grid values must be positive and finite"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("bandwidth grid must be strictly ascending"));
    }
    let pairs = sample_pairs(sample.n(), seed);
    let variance_curve: Vec<(f64, f64)> = grid.iter().map(|&s| (s, kernel_variance(sample, &pairs, s))).collect();
    // First index of the maximum.
    let peak = variance_curve
        .iter()
        .enumerate()
        .fold(0, |best, (k, p)| if p.1 > variance_curve[best].1 { k } else { best });
    let monotonicity_violations = (peak + 1..grid.len())
        .filter(|&k| variance_curve[k].1 > variance_curve[k - 1].1)
        .collect();
    let chosen = (peak..grid.len()).find(|&k| variance_curve[k].1 <= target);
    let (index, converged) = match chosen {
        Some(k) => (k, true),
        None => (grid.len() - 1, false),
    };
    let sigma = grid[index];
    Ok(BandwidthSelection {
        sigma,
        sigma2: sigma * sigma,
        variance_curve,
        target,
        converged,
        monotonicity_violations,
        pairs: pairs.len(),
    })
}

/// `max_{i < top} |a_i - b_i| / max(|a_0|, floor)`, missing entries read as 0.
pub fn relative_discrepancy(a: &[f64], b: &[f64], top: usize) -> f64 {
    let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    let scale = at(a, 0).abs().max(DISCREPANCY_FLOOR);
    (0..top).map(|i| (at(a, i) - at(b, i)).abs()).fold(0.0, f64::max) / scale
}

pub fn select_feature_count(
    x: &EmbeddingSet,
    y: &EmbeddingSet,
    rho: f64,
    sigma2: f64,
    candidates: &[usize],
    seed: u64,
    top: usize,
) -> Result<FeatureCountSelection> {
    if candidates.is_empty() {
        return Err(invalid("feature-count candidates are empty"));
    }
    if candidates.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("feature-count candidates must be strictly ascending"));
    }
    // Candidates run one after another: each holds a 2r x 2r matrix.
    let mut error_curve = Vec::with_capacity(candidates.len());
    for &r in candidates {
        let first = finc_spectrum_auto(&sample_basis(x.d(), r, sigma2, seed)?, x, y, rho)?;
        let second = finc_spectrum_auto(&sample_basis(x.d(), r, sigma2, seed.wrapping_add(1))?, x, y, rho)?;
        error_curve.push((r, relative_discrepancy(first.eigenvalues(), second.eigenvalues(), top)));
    }
    let chosen = error_curve.iter().find(|(_, e)| *e < FEATURE_TOLERANCE);
    let (r, converged) = match chosen {
        Some(&(r, _)) => (r, true),
        None => (*candidates.last().unwrap(), false),
    };
    Ok(FeatureCountSelection {
        r,
        error_curve,
        tolerance: FEATURE_TOLERANCE,
        converged,
        top,
        seed,
    })
}

/// Stacks the rows of `a` and `b`; the bandwidth is tuned on the pooled sample.
pub fn pooled(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<EmbeddingSet> {
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    if a.d() != b.d() {
        return Err(crate::error::FincError::DimensionMismatch {
            expected: a.d(),
            found: b.d(),
        });
    }
    EmbeddingSet::new(a.n() + b.n(), a.d(), data)
}

/// Bandwidth on the pooled sample with the default grid, then feature count
/// at that bandwidth.
pub fn tune(
    x: &EmbeddingSet,
    y: &EmbeddingSet,
    rho: f64,
    candidates: &[usize],
    seed: u64,
) -> Result<TuningResult> {
    let pool = pooled(x, y)?;
    let grid = default_sigma_grid(&pool, seed);
    let bandwidth = select_bandwidth(&pool, &grid, DEFAULT_VARIANCE_TARGET, seed)?;
    let features = select_feature_count(x, y, rho, bandwidth.sigma2, candidates, seed, DEFAULT_TOP_EIGENVALUES)?;
    Ok(TuningResult {
        sigma2: bandwidth.sigma2,
        r: features.r,
        bandwidth,
        features,
    })
}
