//! Exact-kernel reference computations.
//!
//! Builds the `(n + m) x (n + m)` joint kernel matrix
//!
//! ```text
//! K = [ K_XX / n               sqrt(rho/(n m)) K_XY ]
//!     [ sqrt(rho/(n m)) K_YX   rho K_YY / m         ]
//! ```
//!
//! and the conditional kernel matrix `D K`, `D = diag(+1 x n, -1 x m)`, whose
//! nonzero eigenvalues coincide with those of the conditional covariance
//! operator. `D K` is not symmetric, so its spectrum is always obtained from a
//! symmetric matrix with the same nonzero eigenvalues:
//!
//! * factor route: `K ~ L L^T` by pivoted Cholesky, then `L^T D L`;
//! * square-root route: `sqrt(K) D sqrt(K)`.
//!
//! Everything here is O((n + m)^3) and guarded by [`MAX_ORACLE_SIZE`].

use nalgebra::DMatrix;
use serde::Serialize;

use crate::covariance::check_rho;
use crate::error::{invalid, FincError, Result};
use crate::linalg::symmetric_eigen;
use crate::rff::{sample_basis, FourierBasis};
use crate::spectral::finc_spectrum_auto;
use crate::tensor_io::EmbeddingSet;

pub const MAX_ORACLE_SIZE: usize = 5000;

/// `exp(-|a - b|^2 / (2 sigma2))`.
pub fn gaussian_kernel(a: &[f64], b: &[f64], sigma2: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * sigma2)).exp()
}

fn check_pair(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<()> {
    if a.d() != b.d() {
        return Err(FincError::DimensionMismatch {
            expected: a.d(),
            found: b.d(),
        });
    }
    Ok(())
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(invalid(format!("sigma2 must be positive and finite, got {sigma2}")));
    }
    Ok(())
}

fn guard(size: usize) -> Result<()> {
    if size > MAX_ORACLE_SIZE {
        return Err(FincError::SizeGuard {
            size,
            limit: MAX_ORACLE_SIZE,
        });
    }
    Ok(())
}

/// Entry `(i, j)` is the Gaussian kernel between `a_i` and `b_j`.
pub fn gaussian_kernel_matrix(a: &EmbeddingSet, b: &EmbeddingSet, sigma2: f64) -> Result<DMatrix<f64>> {
    check_pair(a, b)?;
    check_sigma2(sigma2)?;
    let rows_a: Vec<Vec<f64>> = (0..a.n()).map(|i| a.row_f64(i)).collect();
    let rows_b: Vec<Vec<f64>> = (0..b.n()).map(|i| b.row_f64(i)).collect();
    Ok(DMatrix::from_fn(a.n(), b.n(), |i, j| gaussian_kernel(&rows_a[i], &rows_b[j], sigma2)))
}

/// Kernel matrix of the proxy kernel `phi(a) . phi(b)`.
pub fn proxy_kernel_matrix(a: &EmbeddingSet, b: &EmbeddingSet, basis: &FourierBasis) -> Result<DMatrix<f64>> {
    check_pair(a, b)?;
    let fa = basis.feature_block(a, 0, a.n())?;
    let fb = basis.feature_block(b, 0, b.n())?;
    Ok(fa.transpose() * fb)
}

/// Symmetric PSD joint kernel matrix with the test block first.
#[derive(Debug, Clone, PartialEq)]
pub struct JointKernelMatrix {
    pub matrix: DMatrix<f64>,
    pub n: usize,
    pub m: usize,
    pub rho: f64,
}

/// `D K` for a [`JointKernelMatrix`] `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalKernelMatrix {
    pub matrix: DMatrix<f64>,
    pub n: usize,
    pub m: usize,
    pub rho: f64,
}

impl JointKernelMatrix {
    /// Assembles the joint matrix from the three kernel blocks.
    pub fn from_blocks(kxx: &DMatrix<f64>, kxy: &DMatrix<f64>, kyy: &DMatrix<f64>, rho: f64) -> Result<Self> {
        check_rho(rho)?;
        let (n, m) = (kxx.nrows(), kyy.nrows());
        if kxy.shape() != (n, m) || kxx.ncols() != n || kyy.ncols() != m {
            return Err(invalid("kernel blocks have inconsistent shapes"));
        }
        let cross = (rho / (n as f64 * m as f64)).sqrt();
        let mut matrix = DMatrix::zeros(n + m, n + m);
        matrix.view_mut((0, 0), (n, n)).copy_from(&(kxx / n as f64));
        matrix.view_mut((0, n), (n, m)).copy_from(&(kxy * cross));
        matrix.view_mut((n, 0), (m, n)).copy_from(&(kxy.transpose() * cross));
        matrix.view_mut((n, n), (m, m)).copy_from(&(kyy * (rho / m as f64)));
        Ok(JointKernelMatrix { matrix, n, m, rho })
    }

    pub fn size(&self) -> usize {
        self.n + self.m
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// Row-scales by `D`.
    pub fn conditional(&self) -> ConditionalKernelMatrix {
        let mut matrix = self.matrix.clone();
        for i in self.n..self.size() {
            matrix.row_mut(i).neg_mut();
        }
        ConditionalKernelMatrix {
            matrix,
            n: self.n,
            m: self.m,
            rho: self.rho,
        }
    }
}

impl ConditionalKernelMatrix {
    /// Undoes the row scaling; `D` is its own inverse.
    pub fn joint(&self) -> JointKernelMatrix {
        let mut matrix = self.matrix.clone();
        for i in self.n..self.n + self.m {
            matrix.row_mut(i).neg_mut();
        }
        JointKernelMatrix {
            matrix,
            n: self.n,
            m: self.m,
            rho: self.rho,
        }
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// Eigenvalues of `D K` (all `n + m`, descending) through the pivoted
    /// Cholesky similarity `L^T D L`; eigenvalues lost to the factor's rank
    /// truncation are reported as zeros.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let joint = self.joint();
        let l = pivoted_cholesky(&joint.matrix, CHOLESKY_TOLERANCE * joint.trace().max(1.0));
        let mut ld = l.clone();
        for i in self.n..joint.size() {
            ld.row_mut(i).neg_mut();
        }
        let core = l.transpose() * ld;
        let core = (&core + core.transpose()) * 0.5;
        let (mut vals, _) = symmetric_eigen(&core)?;
        vals.resize(joint.size(), 0.0);
        vals.sort_by(|a, b| b.total_cmp(a));
        Ok(vals)
    }
}

const CHOLESKY_TOLERANCE: f64 = 1e-14;

/// Pivoted Cholesky `K ~ L L^T` with `L` of shape `N x rank`; stops once the
/// largest remaining diagonal is below `tol`. Rows of `L` follow the original
/// ordering of `K`.
pub fn pivoted_cholesky(k: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = k.nrows();
    let mut diag: Vec<f64> = (0..n).map(|i| k[(i, i)]).collect();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut used = vec![false; n];
    while cols.len() < n {
        let (p, &dp) = diag
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        if dp <= tol {
            break;
        }
        used[p] = true;
        let root = dp.sqrt();
        let mut col = vec![0.0; n];
        for i in 0..n {
            if used[i] && i != p {
                continue;
            }
            let mut v = k[(i, p)];
            for prev in &cols {
                v -= prev[i] * prev[p];
            }
            col[i] = v / root;
        }
        col[p] = root;
        for i in 0..n {
            if !used[i] {
                diag[i] -= col[i] * col[i];
            }
        }
        diag[p] = 0.0;
        cols.push(col);
    }
    DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i])
}

pub fn joint_kernel_matrix(x: &EmbeddingSet, y: &EmbeddingSet, rho: f64, sigma2: f64) -> Result<JointKernelMatrix> {
    check_pair(x, y)?;
    guard(x.n() + y.n())?;
    let kxx = gaussian_kernel_matrix(x, x, sigma2)?;
    let kxy = gaussian_kernel_matrix(x, y, sigma2)?;
    let kyy = gaussian_kernel_matrix(y, y, sigma2)?;
    JointKernelMatrix::from_blocks(&kxx, &kxy, &kyy, rho)
}

/// Joint matrix of the proxy kernel defined by `basis`.
pub fn proxy_joint_kernel_matrix(
    x: &EmbeddingSet,
    y: &EmbeddingSet,
    rho: f64,
    basis: &FourierBasis,
) -> Result<JointKernelMatrix> {
    check_pair(x, y)?;
    guard(x.n() + y.n())?;
    let kxx = proxy_kernel_matrix(x, x, basis)?;
    let kxy = proxy_kernel_matrix(x, y, basis)?;
    let kyy = proxy_kernel_matrix(y, y, basis)?;
    JointKernelMatrix::from_blocks(&kxx, &kxy, &kyy, rho)
}

pub fn conditional_kernel_matrix(
    x: &EmbeddingSet,
    y: &EmbeddingSet,
    rho: f64,
    sigma2: f64,
) -> Result<ConditionalKernelMatrix> {
    Ok(joint_kernel_matrix(x, y, rho, sigma2)?.conditional())
}

/// Clamp band for negative eigenvalues of the PSD joint matrix, relative to `1 + rho`.
pub const PSD_CLAMP_TOLERANCE: f64 = 1e-10;

/// Eigenvalues of `sqrt(K) D sqrt(K)` (all `n + m`, descending).
pub fn sqrt_similarity_eigenvalues(joint: &JointKernelMatrix) -> Result<Vec<f64>> {
    let (vals, vecs) = symmetric_eigen(&joint.matrix)?;
    let floor = -PSD_CLAMP_TOLERANCE * (1.0 + joint.rho);
    // Eigenvalues within the solver's rounding of zero are set to zero before
    // taking roots; otherwise sqrt lifts O(eps) noise to O(sqrt(eps)).
    let rank_floor = joint.size() as f64 * f64::EPSILON * vals.first().copied().unwrap_or(0.0).max(0.0);
    let mut roots = Vec::with_capacity(vals.len());
    for &v in &vals {
        if v < floor {
            return Err(FincError::Numerical(format!(
                "joint kernel matrix has eigenvalue {v:.3e}, below the PSD clamp floor {floor:.3e}"
            )));
        }
        roots.push(if v > rank_floor { v.sqrt() } else { 0.0 });
    }
    let scaled = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |i, k| vecs[(i, k)] * roots[k]);
    let root = &scaled * vecs.transpose();
    let mut d_root = root.clone();
    for i in joint.n..joint.size() {
        d_root.row_mut(i).neg_mut();
    }
    let sym = &root * d_root;
    let sym = (&sym + sym.transpose()) * 0.5;
    Ok(symmetric_eigen(&sym)?.0)
}

/// Top `top` eigenvalues of the exact conditional kernel operator, descending.
pub fn exact_spectrum(x: &EmbeddingSet, y: &EmbeddingSet, rho: f64, sigma2: f64, top: usize) -> Result<Vec<f64>> {
    let joint = joint_kernel_matrix(x, y, rho, sigma2)?;
    let mut vals = sqrt_similarity_eigenvalues(&joint)?;
    vals.truncate(top);
    Ok(vals)
}

/// Pads the shorter list with zeros, sorts both descending, and returns the
/// l2 and max absolute differences. Zero eigenvalues not materialized by a
/// route are thereby matched with each other.
pub fn spectrum_gap(a: &[f64], b: &[f64]) -> (f64, f64) {
    let len = a.len().max(b.len());
    let prep = |v: &[f64]| {
        let mut v = v.to_vec();
        v.resize(len, 0.0);
        v.sort_by(|p, q| q.total_cmp(p));
        v
    };
    let (a, b) = (prep(a), prep(b));
    let mut sq = 0.0;
    let mut max = 0.0f64;
    for (p, q) in a.iter().zip(&b) {
        sq += (p - q) * (p - q);
        max = max.max((p - q).abs());
    }
    (sq.sqrt(), max)
}

/// Eigenvalue gaps for one feature count and basis seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRecord {
    pub r: usize,
    pub seed: u64,
    /// `sqrt(sum_i (finc_i - exact_i)^2)` over the full zero-padded spectra.
    pub l2_gap: f64,
    pub max_gap: f64,
    /// The same two gaps restricted to the `top` largest eigenvalues.
    pub top: usize,
    pub top_l2_gap: f64,
    pub top_max_gap: f64,
}

fn top_padded(v: &[f64], top: usize) -> Vec<f64> {
    (0..top).map(|i| v.get(i).copied().unwrap_or(0.0)).collect()
}

/// FINC-vs-exact gaps for each `r`, reusing an exact spectrum computed by the caller.
#[allow(clippy::too_many_arguments)]
pub fn error_profile_against(
    exact: &[f64],
    x: &EmbeddingSet,
    y: &EmbeddingSet,
    rho: f64,
    sigma2: f64,
    r_values: &[usize],
    seed: u64,
    top: usize,
) -> Result<Vec<ErrorRecord>> {
    let exact_top = top_padded(exact, top);
    r_values
        .iter()
        .map(|&r| {
            let basis = sample_basis(x.d(), r, sigma2, seed)?;
            let spec = finc_spectrum_auto(&basis, x, y, rho)?;
            let (l2_gap, max_gap) = spectrum_gap(spec.eigenvalues(), exact);
            let (top_l2_gap, top_max_gap) = spectrum_gap(&top_padded(spec.eigenvalues(), top), &exact_top);
            Ok(ErrorRecord {
                r,
                seed,
                l2_gap,
                max_gap,
                top,
                top_l2_gap,
                top_max_gap,
            })
        })
        .collect()
}

/// Default number of leading eigenvalues in the restricted gaps.
pub const DEFAULT_PROFILE_TOP: usize = 10;

/// FINC-vs-exact eigenvalue gaps for each `r` with the basis drawn from `seed`.
pub fn rff_error_profile(
    x: &EmbeddingSet,
    y: &EmbeddingSet,
    rho: f64,
    sigma2: f64,
    r_values: &[usize],
    seed: u64,
) -> Result<Vec<ErrorRecord>> {
    let joint = joint_kernel_matrix(x, y, rho, sigma2)?;
    let exact = sqrt_similarity_eigenvalues(&joint)?;
    error_profile_against(&exact, x, y, rho, sigma2, r_values, seed, DEFAULT_PROFILE_TOP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn cloud(n: usize, d: usize, shift: f32, seed: u64) -> EmbeddingSet {
        let mut s = Stream::new(seed, 7);
        let data = (0..n * d).map(|_| s.normal() as f32 + shift).collect();
        EmbeddingSet::new(n, d, data).unwrap()
    }

    #[test]
    fn kernel_matrix_basics() {
        let a = cloud(20, 3, 0.0, 1);
        let k = gaussian_kernel_matrix(&a, &a, 0.8).unwrap();
        for i in 0..20 {
            assert_eq!(k[(i, i)], 1.0);
        }
        assert!(k.iter().all(|&v| v > 0.0 && v <= 1.0));
        let b = cloud(5, 2, 0.0, 2);
        assert!(gaussian_kernel_matrix(&a, &b, 1.0).is_err());
        assert!(gaussian_kernel_matrix(&a, &a, 0.0).is_err());
    }

    #[test]
    fn closed_form_entry() {
        let sigma2: f64 = 1.7;
        // |a - b|^2 = 2 sigma2.
        let a = [0.0, 0.0];
        let b = [sigma2.sqrt(), sigma2.sqrt()];
        assert!((gaussian_kernel(&a, &b, sigma2) - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn separable_singletons() {
        let x = EmbeddingSet::new(1, 1, vec![0.0]).unwrap();
        let y = EmbeddingSet::new(1, 1, vec![100.0]).unwrap();
        let cond = conditional_kernel_matrix(&x, &y, 2.0, 1.0).unwrap();
        assert!((cond.matrix[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((cond.matrix[(1, 1)] + 2.0).abs() < 1e-15);
        assert!(cond.matrix[(0, 1)].abs() < 1e-12);
        let vals = cond.eigenvalues().unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-12 && (vals[1] + 2.0).abs() < 1e-12);
        let exact = exact_spectrum(&x, &y, 3.0, 1.0, 2).unwrap();
        assert!((exact[0] - 1.0).abs() < 1e-12 && (exact[1] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_sets_cancel() {
        let x = cloud(40, 2, 0.0, 3);
        let cond = conditional_kernel_matrix(&x, &x, 1.0, 1.0).unwrap();
        assert!(cond.eigenvalues().unwrap().iter().all(|v| v.abs() < 1e-9));
        assert!(exact_spectrum(&x, &x, 1.0, 1.0, 10).unwrap().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn traces_and_psd() {
        let x = cloud(30, 2, 0.0, 4);
        let y = cloud(25, 2, 1.0, 5);
        for rho in [0.5, 1.0, 2.0] {
            let joint = joint_kernel_matrix(&x, &y, rho, 0.9).unwrap();
            assert!((joint.trace() - (1.0 + rho)).abs() < 1e-9);
            assert!((joint.conditional().trace() - (1.0 - rho)).abs() < 1e-9);
            let (vals, _) = symmetric_eigen(&joint.matrix).unwrap();
            assert!(*vals.last().unwrap() >= -1e-9 * (1.0 + rho));
        }
    }

    #[test]
    fn two_routes_agree() {
        let x = cloud(60, 3, 0.0, 6);
        let y = cloud(50, 3, 1.2, 7);
        let cond = conditional_kernel_matrix(&x, &y, 1.4, 2.0).unwrap();
        let a = cond.eigenvalues().unwrap();
        let b = sqrt_similarity_eigenvalues(&cond.joint()).unwrap();
        let (_, max) = spectrum_gap(&a, &b);
        assert!(max < 1e-8, "{max}");
    }

    #[test]
    fn permutation_invariance() {
        let x = cloud(30, 2, 0.0, 8);
        let y = cloud(20, 2, 0.5, 9);
        let px: Vec<usize> = (0..30).rev().collect();
        let py: Vec<usize> = (0..20).map(|i| (i * 7) % 20).collect();
        let a = exact_spectrum(&x, &y, 1.0, 1.0, 50).unwrap();
        let b = exact_spectrum(&x.select(&px).unwrap(), &y.select(&py).unwrap(), 1.0, 1.0, 50).unwrap();
        assert!(spectrum_gap(&a, &b).1 < 1e-10);
    }

    #[test]
    fn pivoted_cholesky_reconstructs_low_rank() {
        let mut s = Stream::new(1, 1);
        let g = DMatrix::from_fn(12, 4, |_, _| s.normal());
        let k = &g * g.transpose();
        let l = pivoted_cholesky(&k, 1e-12);
        assert_eq!(l.ncols(), 4);
        assert!((&l * l.transpose() - k).amax() < 1e-10);
    }

    #[test]
    fn size_guard_is_hard_error() {
        let big = EmbeddingSet::new(MAX_ORACLE_SIZE, 1, vec![0.0; MAX_ORACLE_SIZE]).unwrap();
        let small = EmbeddingSet::new(1, 1, vec![0.0]).unwrap();
        let err = joint_kernel_matrix(&big, &small, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, FincError::SizeGuard { size: 5001, limit: 5000 }));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn psd_clamp_rejects_indefinite_input() {
        let mut matrix = DMatrix::identity(2, 2);
        matrix[(1, 1)] = -1e-3;
        let joint = JointKernelMatrix { matrix, n: 1, m: 1, rho: 1.0 };
        assert!(matches!(sqrt_similarity_eigenvalues(&joint), Err(FincError::Numerical(_))));
    }

    #[test]
    fn gap_padding() {
        let (l2, max) = spectrum_gap(&[0.5, -0.25], &[0.5, 0.0, 0.0, -0.25]);
        assert_eq!((l2, max), (0.0, 0.0));
        let (l2, _) = spectrum_gap(&[0.3, 0.4], &[0.0, 0.0]);
        assert!((l2 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn proxy_matrix_matches_kernel_estimate() {
        let x = cloud(5, 2, 0.0, 10);
        let basis = sample_basis(2, 30, 1.0, 11).unwrap();
        let k = proxy_kernel_matrix(&x, &x, &basis).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let e = basis.kernel_estimate(&x.row_f64(i), &x.row_f64(j)).unwrap();
                assert!((k[(i, j)] - e).abs() < 1e-12);
            }
        }
    }
}
