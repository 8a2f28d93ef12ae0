//! Spectrum of the conditional covariance, mode extraction and scoring.
//!
//! Two routes produce a [`ConditionalSpectrum`]:
//!
//! * [`eigendecompose`] solves the dense `2r x 2r` conditional covariance.
//! * [`spectrum_from_samples`] works from the weighted feature matrix
//!   `P = [phi(x_i) / sqrt(n) | sqrt(rho / m) phi(y_j)]`, for which
//!   `Lambda = P D P^T` with `D = diag(+1 x n, -1 x m)`. With `P = Q R`
//!   (thin QR), `Lambda = Q (R D R^T) Q^T`, so the `N x N` core `R D R^T`
//!   carries every possibly-nonzero eigenpair. Used when `n + m < 2r`.
//!
//! Both routes return eigenvalues in descending order and fix each
//! eigenvector's sign so its largest-magnitude coordinate is positive.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{check_rho, conditional_covariance, ConditionalCovariance, DEFAULT_CHUNK};
use crate::error::{invalid, FincError, Result};
use crate::linalg::{symmetric_eigen, thin_qr};
use crate::rff::FourierBasis;
use crate::tensor_io::EmbeddingSet;

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalSpectrum {
    eigenvalues: Vec<f64>,
    /// One eigenvector per column, `dim x eigenvalues.len()`.
    eigenvectors: DMatrix<f64>,
    rho: f64,
}

impl ConditionalSpectrum {
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn eigenvector(&self, k: usize) -> DVector<f64> {
        self.eigenvectors.column(k).into_owned()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Dimension of the feature space the eigenvectors live in.
    pub fn dim(&self) -> usize {
        self.eigenvectors.nrows()
    }

    /// `sum_k lambda_k v_k v_k^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.dim(), self.eigenvalues.len(), |i, k| {
            self.eigenvectors[(i, k)] * self.eigenvalues[k]
        });
        scaled * self.eigenvectors.transpose()
    }
}

/// How the spectrum is computed by [`finc_spectrum`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumRoute {
    /// Dense eigendecomposition of the streamed `2r x 2r` conditional covariance.
    Covariance,
    /// Thin QR of the weighted feature matrix; exact when `n + m` is small.
    SampleDual,
}

impl SpectrumRoute {
    /// `SampleDual` when `n + m < 2r`, else `Covariance`.
    pub fn pick(basis: &FourierBasis, n: usize, m: usize) -> Self {
        if n + m < basis.feature_dim() {
            SpectrumRoute::SampleDual
        } else {
            SpectrumRoute::Covariance
        }
    }
}

pub fn eigendecompose(cond: &ConditionalCovariance) -> Result<ConditionalSpectrum> {
    let (eigenvalues, eigenvectors) = symmetric_eigen(cond.matrix())?;
    Ok(ConditionalSpectrum {
        eigenvalues,
        eigenvectors,
        rho: cond.rho(),
    })
}

/// Weighted feature matrix `[phi(x_i)/sqrt(n) | sqrt(rho/m) phi(y_j)]`, `2r x (n + m)`.
pub fn weighted_features(
    basis: &FourierBasis,
    test: &EmbeddingSet,
    reference: &EmbeddingSet,
    rho: f64,
) -> Result<DMatrix<f64>> {
    check_rho(rho)?;
    let (n, m) = (test.n(), reference.n());
    let fx = basis.feature_block(test, 0, n)? / (n as f64).sqrt();
    let fy = basis.feature_block(reference, 0, m)? * (rho / m as f64).sqrt();
    let mut out = DMatrix::zeros(basis.feature_dim(), n + m);
    out.columns_mut(0, n).copy_from(&fx);
    out.columns_mut(n, m).copy_from(&fy);
    Ok(out)
}

pub fn spectrum_from_samples(
    basis: &FourierBasis,
    test: &EmbeddingSet,
    reference: &EmbeddingSet,
    rho: f64,
) -> Result<ConditionalSpectrum> {
    let n = test.n();
    let weighted = weighted_features(basis, test, reference, rho)?;
    let (q, r) = thin_qr(&weighted);
    // core = R D R^T, with D flipping the sign of the reference columns.
    let mut rd = r.clone();
    for j in n..rd.ncols() {
        rd.column_mut(j).neg_mut();
    }
    let core = &rd * r.transpose();
    let core = (&core + core.transpose()) * 0.5;
    let (eigenvalues, small) = symmetric_eigen(&core)?;
    let mut eigenvectors = q * small;
    for mut col in eigenvectors.column_iter_mut() {
        let pivot = col.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
    Ok(ConditionalSpectrum {
        eigenvalues,
        eigenvectors,
        rho,
    })
}

/// FINC spectrum through the requested route.
pub fn finc_spectrum(
    basis: &FourierBasis,
    test: &EmbeddingSet,
    reference: &EmbeddingSet,
    rho: f64,
    route: SpectrumRoute,
    chunk: usize,
) -> Result<ConditionalSpectrum> {
    match route {
        SpectrumRoute::Covariance => {
            let cond = conditional_covariance(basis, test, reference, rho, chunk)?;
            eigendecompose(&cond)
        }
        SpectrumRoute::SampleDual => spectrum_from_samples(basis, test, reference, rho),
    }
}

/// Spectrum through whichever route [`SpectrumRoute::pick`] selects.
pub fn finc_spectrum_auto(
    basis: &FourierBasis,
    test: &EmbeddingSet,
    reference: &EmbeddingSet,
    rho: f64,
) -> Result<ConditionalSpectrum> {
    let route = SpectrumRoute::pick(basis, test.n(), reference.n());
    finc_spectrum(basis, test, reference, rho, route, DEFAULT_CHUNK)
}

/// Eigenvalues count as modes when `lambda > max(absolute, relative * lambda_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeThreshold {
    pub absolute: f64,
    pub relative: f64,
}

impl Default for ModeThreshold {
    fn default() -> Self {
        ModeThreshold {
            absolute: 1e-8,
            relative: 1e-6,
        }
    }
}

impl ModeThreshold {
    pub fn cutoff(&self, lambda_max: f64) -> f64 {
        self.absolute.max(self.relative * lambda_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub eigenvalue: f64,
    pub eigenvector: DVector<f64>,
    /// 1-based position among the extracted modes.
    pub rank: usize,
}

/// Eigenpairs above the threshold, at most `max_modes`, in descending order.
pub fn extract_modes(spec: &ConditionalSpectrum, max_modes: usize, threshold: ModeThreshold) -> Vec<Mode> {
    let Some(&lambda_max) = spec.eigenvalues.first() else {
        return Vec::new();
    };
    let cutoff = threshold.cutoff(lambda_max);
    spec.eigenvalues
        .iter()
        .take_while(|&&l| l > cutoff)
        .take(max_modes)
        .enumerate()
        .map(|(k, &eigenvalue)| Mode {
            eigenvalue,
            eigenvector: spec.eigenvector(k),
            rank: k + 1,
        })
        .collect()
}

fn check_mode_dim(mode: &Mode, basis: &FourierBasis) -> Result<()> {
    if mode.eigenvector.len() != basis.feature_dim() {
        return Err(FincError::DimensionMismatch {
            expected: basis.feature_dim(),
            found: mode.eigenvector.len(),
        });
    }
    Ok(())
}

/// `v . phi(x)`: the mode score, bounded by `|v|` since `|phi(x)| = 1`.
pub fn mode_score(mode: &Mode, basis: &FourierBasis, x: &[f64]) -> Result<f64> {
    check_mode_dim(mode, basis)?;
    let phi = basis.feature_map(x)?;
    Ok(phi.dot(mode.eigenvector.as_slice()))
}

/// Scores of every sample against every mode: `n x modes.len()`.
///
/// Samples are processed in fixed chunks and the chunks are independent, so
/// the result does not depend on the thread count.
pub fn score_matrix(modes: &[Mode], basis: &FourierBasis, set: &EmbeddingSet) -> Result<DMatrix<f64>> {
    for mode in modes {
        check_mode_dim(mode, basis)?;
    }
    if set.d() != basis.d() {
        return Err(FincError::DimensionMismatch {
            expected: basis.d(),
            found: set.d(),
        });
    }
    let t = modes.len();
    let mut vt = DMatrix::zeros(t, basis.feature_dim());
    for (k, mode) in modes.iter().enumerate() {
        vt.row_mut(k).copy_from(&mode.eigenvector.transpose());
    }
    let starts: Vec<usize> = (0..set.n()).step_by(DEFAULT_CHUNK).collect();
    let blocks: Vec<DMatrix<f64>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + DEFAULT_CHUNK).min(set.n());
            let features = basis.feature_block(set, start, end)?;
            Ok(&vt * features)
        })
        .collect::<Result<_>>()?;
    let mut out = DMatrix::zeros(set.n(), t);
    for (&start, block) in starts.iter().zip(&blocks) {
        for c in 0..block.ncols() {
            for k in 0..t {
                out[(start + c, k)] = block[(k, c)];
            }
        }
    }
    Ok(out)
}

/// Mean feature vector `(1/n) sum_i phi(x_i)`, summed chunk by chunk in index order.
pub fn mean_feature(basis: &FourierBasis, set: &EmbeddingSet) -> Result<DVector<f64>> {
    let starts: Vec<usize> = (0..set.n()).step_by(DEFAULT_CHUNK).collect();
    let partials: Vec<DVector<f64>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + DEFAULT_CHUNK).min(set.n());
            Ok(basis.feature_block(set, start, end)?.column_sum())
        })
        .collect::<Result<_>>()?;
    let mut total = DVector::zeros(basis.feature_dim());
    for p in &partials {
        total += p;
    }
    Ok(total / set.n() as f64)
}

/// Flips every mode whose mean score over `set` is negative, so that a
/// mode's top-scoring samples lie on the side carrying the test mass. The
/// eigenvector sign convention is arbitrary with respect to scores; this
/// orientation is data-dependent but deterministic. Returns which modes were
/// flipped.
pub fn orient_modes(modes: &mut [Mode], basis: &FourierBasis, set: &EmbeddingSet) -> Result<Vec<bool>> {
    for mode in modes.iter() {
        check_mode_dim(mode, basis)?;
    }
    let mean = mean_feature(basis, set)?;
    Ok(modes
        .iter_mut()
        .map(|mode| {
            let flip = mode.eigenvector.dot(&mean) < 0.0;
            if flip {
                mode.eigenvector.neg_mut();
            }
            flip
        })
        .collect())
}

/// Ranks `(index, score)` pairs: descending score, ascending index on ties.
pub fn rank_scores(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.into_iter().take(k).map(|i| (i, scores[i])).collect()
}

/// The `k` highest-scoring samples of `set` for `mode`.
pub fn top_k_samples(mode: &Mode, basis: &FourierBasis, set: &EmbeddingSet, k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(invalid("top-k needs k >= 1"));
    }
    let scores = score_matrix(std::slice::from_ref(mode), basis, set)?;
    Ok(rank_scores(scores.column(0).as_slice(), k))
}

/// Index of the highest-scoring mode for every sample; ties go to the lower rank.
pub fn assign_modes(modes: &[Mode], basis: &FourierBasis, set: &EmbeddingSet) -> Result<Vec<usize>> {
    if modes.is_empty() {
        return Err(invalid("mode assignment needs at least one mode"));
    }
    let scores = score_matrix(modes, basis, set)?;
    Ok(argmax_rows(&scores))
}

pub(crate) fn argmax_rows(scores: &DMatrix<f64>) -> Vec<usize> {
    (0..scores.nrows())
        .map(|i| {
            let mut best = 0;
            for k in 1..scores.ncols() {
                if scores[(i, k)] > scores[(i, best)] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::finalize;
    use crate::covariance::CovarianceAccumulator;
    use crate::rff::sample_basis;
    use crate::rng::Stream;

    fn gaussian_set(n: usize, d: usize, shift: f32, seed: u64) -> EmbeddingSet {
        let mut s = Stream::new(seed, 0);
        let data = (0..n * d).map(|_| s.normal() as f32 + shift).collect();
        EmbeddingSet::new(n, d, data).unwrap()
    }

    fn spectrum_of(values: &[f64]) -> ConditionalSpectrum {
        let n = values.len();
        ConditionalSpectrum {
            eigenvalues: values.to_vec(),
            eigenvectors: DMatrix::identity(n, n),
            rho: 1.0,
        }
    }

    #[test]
    fn embedded_symmetric_pair() {
        let mut m = DMatrix::zeros(6, 6);
        m[(0, 0)] = 2.0;
        m[(1, 1)] = 2.0;
        m[(0, 1)] = 1.0;
        m[(1, 0)] = 1.0;
        let (vals, _) = symmetric_eigen(&m).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sign_filter() {
        let spec = spectrum_of(&[0.4, 0.1, -0.02, -0.5]);
        let modes = extract_modes(&spec, 10, ModeThreshold::default());
        assert_eq!(modes.len(), 2);
        assert_eq!(modes[1].rank, 2);
        assert_eq!(extract_modes(&spec, 1, ModeThreshold::default()).len(), 1);
    }

    #[test]
    fn relative_floor_suppresses_rounding_ghosts() {
        let spec = spectrum_of(&[0.5, 1e-9, 1e-12, -0.5]);
        assert_eq!(extract_modes(&spec, 10, ModeThreshold::default()).len(), 1);
        let spec = spectrum_of(&[2e-9, 1e-9]);
        assert!(extract_modes(&spec, 10, ModeThreshold::default()).is_empty());
    }

    #[test]
    fn no_modes_without_novelty() {
        let basis = sample_basis(3, 40, 1.0, 2).unwrap();
        let x = gaussian_set(200, 3, 0.0, 1);
        let cond = crate::covariance::conditional_covariance(&basis, &x, &x, 1.0, 64).unwrap();
        let spec = eigendecompose(&cond).unwrap();
        assert!(spec.eigenvalues().iter().all(|v| v.abs() < 1e-12));
        assert!(extract_modes(&spec, 10, ModeThreshold::default()).is_empty());
    }

    #[test]
    fn spectrum_invariants() {
        let basis = sample_basis(3, 60, 1.0, 4).unwrap();
        let x = gaussian_set(150, 3, 0.0, 5);
        let y = gaussian_set(120, 3, 1.5, 6);
        let rho = 0.7;
        let cond = crate::covariance::conditional_covariance(&basis, &x, &y, rho, 50).unwrap();
        let spec = eigendecompose(&cond).unwrap();
        let sum: f64 = spec.eigenvalues().iter().sum();
        assert!((sum - (1.0 - rho)).abs() < 1e-8);
        let v = spec.eigenvectors();
        assert!((v.transpose() * v - DMatrix::identity(120, 120)).amax() < 1e-8);
        let scale = cond.matrix().norm().max(1.0);
        assert!((spec.reconstruct() - cond.matrix()).norm() <= 1e-7 * scale);
        for k in 0..spec.eigenvalues().len() {
            let vk = spec.eigenvector(k);
            assert!((cond.matrix() * &vk - &vk * spec.eigenvalues()[k]).norm() <= 1e-8);
        }
        let positive: f64 = spec.eigenvalues().iter().filter(|&&v| v > 0.0).sum();
        assert!((-1e-8..=1.0 + 1e-8).contains(&positive));
    }

    #[test]
    fn dual_route_matches_dense_route() {
        let basis = sample_basis(2, 80, 1.0, 7).unwrap();
        let x = gaussian_set(40, 2, 0.0, 8);
        let y = gaussian_set(50, 2, 1.0, 9);
        let dense = finc_spectrum(&basis, &x, &y, 1.3, SpectrumRoute::Covariance, 16).unwrap();
        let dual = finc_spectrum(&basis, &x, &y, 1.3, SpectrumRoute::SampleDual, 16).unwrap();
        assert_eq!(dual.eigenvalues().len(), 90);
        assert_eq!(dual.dim(), 160);
        for (a, b) in dense.eigenvalues().iter().take(10).zip(dual.eigenvalues()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        // Largest eigenvalues are well separated here, so vectors agree too.
        for k in 0..3 {
            assert!((dense.eigenvector(k) - dual.eigenvector(k)).amax() < 1e-6);
        }
        let sum: f64 = dual.eigenvalues().iter().sum();
        assert!((sum - (1.0 - 1.3)).abs() < 1e-8);
        assert_eq!(SpectrumRoute::pick(&basis, 40, 50), SpectrumRoute::SampleDual);
        assert_eq!(SpectrumRoute::pick(&basis, 100, 60), SpectrumRoute::Covariance);
    }

    #[test]
    fn score_is_linear_and_bounded() {
        let basis = sample_basis(3, 30, 1.0, 3).unwrap();
        let x = gaussian_set(80, 3, 0.0, 10);
        let y = gaussian_set(80, 3, 2.0, 11);
        let mut ax = CovarianceAccumulator::for_basis(&basis);
        ax.accumulate_set(&basis, &x, 32).unwrap();
        let mut ay = CovarianceAccumulator::for_basis(&basis);
        ay.accumulate_set(&basis, &y, 32).unwrap();
        let spec = eigendecompose(&finalize(&ax, &ay, 1.0).unwrap()).unwrap();
        let mode = extract_modes(&spec, 1, ModeThreshold::default()).remove(0);
        let mut scaled = mode.clone();
        scaled.eigenvector *= 3.0;
        for i in 0..10 {
            let p = x.row_f64(i);
            let s = mode_score(&mode, &basis, &p).unwrap();
            assert!(s.abs() <= 1.0 + 1e-12);
            assert!((mode_score(&scaled, &basis, &p).unwrap() - 3.0 * s).abs() < 1e-12);
        }
        assert!(mode_score(&mode, &basis, &[1.0]).is_err());
    }

    #[test]
    fn printed_score_formula_gives_same_ranking() {
        let basis = sample_basis(2, 25, 1.0, 5).unwrap();
        let set = gaussian_set(60, 2, 0.0, 12);
        let spec = spectrum_from_samples(&basis, &set, &gaussian_set(60, 2, 1.0, 13), 1.0).unwrap();
        let mode = extract_modes(&spec, 1, ModeThreshold::default()).remove(0);
        let ours: Vec<f64> = (0..60).map(|i| mode_score(&mode, &basis, &set.row_f64(i)).unwrap()).collect();
        let printed: Vec<f64> = (0..60)
            .map(|i| {
                let x = set.row_f64(i);
                (0..basis.r())
                    .map(|f| {
                        let phase: f64 = (0..2).map(|j| basis.omega()[(f, j)] * x[j]).sum();
                        mode.eigenvector[2 * f] * phase.cos() + mode.eigenvector[2 * f + 1] * phase.sin()
                    })
                    .sum()
            })
            .collect();
        let a: Vec<usize> = rank_scores(&ours, 60).into_iter().map(|p| p.0).collect();
        let b: Vec<usize> = rank_scores(&printed, 60).into_iter().map(|p| p.0).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn top_k_selection_and_ties() {
        assert_eq!(rank_scores(&[0.1, 0.9, 0.5], 1), vec![(1, 0.9)]);
        let tied = rank_scores(&[0.3; 6], 4);
        assert_eq!(tied.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(rank_scores(&[0.2, 0.1], 5).len(), 2);
    }

    #[test]
    fn top_k_on_set() {
        let basis = sample_basis(2, 20, 1.0, 1).unwrap();
        let set = gaussian_set(3, 2, 0.0, 2);
        let mode = Mode {
            eigenvalue: 1.0,
            eigenvector: DVector::from_fn(40, |i, _| if i == 0 { 1.0 } else { 0.0 }),
            rank: 1,
        };
        let scores: Vec<f64> = (0..3).map(|i| mode_score(&mode, &basis, &set.row_f64(i)).unwrap()).collect();
        let best = rank_scores(&scores, 1)[0].0;
        let got = top_k_samples(&mode, &basis, &set, 1).unwrap();
        assert_eq!(got[0].0, best);
        assert!(top_k_samples(&mode, &basis, &set, 0).is_err());
        assert_eq!(top_k_samples(&mode, &basis, &set, 10).unwrap().len(), 3);
    }

    #[test]
    fn orientation_points_at_test_mass() {
        let x = gaussian_set(50, 2, 0.0, 21);
        let basis = sample_basis(2, 40, 1.0, 22).unwrap();
        let mean = mean_feature(&basis, &x).unwrap();
        let direct: DVector<f64> = (0..50).map(|i| basis.feature_map_f32(x.row(i)).unwrap().into_inner()).fold(
            DVector::zeros(80),
            |acc, f| acc + DVector::from_vec(f),
        ) / 50.0;
        assert!((&mean - &direct).amax() < 1e-12);
        let unit = mean.normalize();
        let mut modes = vec![
            Mode { eigenvalue: 0.2, eigenvector: -unit.clone(), rank: 1 },
            Mode { eigenvalue: 0.1, eigenvector: unit.clone(), rank: 2 },
        ];
        assert_eq!(orient_modes(&mut modes, &basis, &x).unwrap(), vec![true, false]);
        for mode in &modes {
            let scores = score_matrix(std::slice::from_ref(mode), &basis, &x).unwrap();
            assert!(scores.sum() > 0.0);
        }
    }

    #[test]
    fn assignment_rules() {
        let basis = sample_basis(2, 20, 1.0, 1).unwrap();
        let set = gaussian_set(30, 2, 0.0, 2);
        let mode = |seed: u64| {
            let mut s = Stream::new(seed, 0);
            let v = DVector::from_fn(40, |_, _| s.normal());
            Mode { eigenvalue: 0.1, eigenvector: v.normalize(), rank: 1 }
        };
        let one = vec![mode(1)];
        assert!(assign_modes(&one, &basis, &set).unwrap().iter().all(|&a| a == 0));
        let three = vec![mode(1), mode(2), mode(3)];
        let base = assign_modes(&three, &basis, &set).unwrap();
        let scaled: Vec<Mode> = three
            .iter()
            .map(|m| Mode { eigenvector: &m.eigenvector * 2.5, ..m.clone() })
            .collect();
        assert_eq!(assign_modes(&scaled, &basis, &set).unwrap(), base);
        assert!(assign_modes(&[], &basis, &set).is_err());
        // Identical modes tie; the lower rank wins.
        let twins = vec![mode(4), mode(4)];
        assert!(assign_modes(&twins, &basis, &set).unwrap().iter().all(|&a| a == 0));
    }
}
