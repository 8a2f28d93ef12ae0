//! Dense kernels backed by faer.
//!
//! faer is built without its rayon feature, so every call here runs
//! sequentially and produces the same bits regardless of the caller's
//! thread pool.

use faer::{Mat, Side};
use nalgebra::DMatrix;

use crate::error::{FincError, Result};

fn to_faer(a: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

fn from_faer(a: faer::MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

/// Eigendecomposition of a symmetric matrix.
///
/// Eigenvalues are returned in descending order with eigenvectors as the
/// matching columns. Each eigenvector is signed so that its largest-magnitude
/// coordinate (first one on ties) is positive. Only the lower triangle of
/// `a` is read.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(FincError::DimensionMismatch {
            expected: n,
            found: a.ncols(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(FincError::Numerical(format!(
            "non-finite entry in {n}x{n} symmetric matrix"
        )));
    }
    if n == 0 {
        return Ok((Vec::new(), DMatrix::zeros(0, 0)));
    }
    let evd = to_faer(a).self_adjoint_eigen(Side::Lower).map_err(|e| {
        FincError::Numerical(format!(
            "symmetric eigensolver did not converge on a {n}x{n} matrix \
             (Frobenius norm {:.3e}): {e:?}",
            a.norm()
        ))
    })?;
    let s = evd.S().column_vector();
    let u = evd.U();
    // faer returns ascending order.
    let values: Vec<f64> = (0..n).rev().map(|i| s[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, src) in (0..n).rev().enumerate() {
        let mut pivot = 0;
        let mut best = -1.0;
        for i in 0..n {
            let m = u[(i, src)].abs();
            if m > best {
                best = m;
                pivot = i;
            }
        }
        let sign = if u[(pivot, src)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[(i, dst)] = sign * u[(i, src)];
        }
    }
    Ok((values, vectors))
}

/// Thin Householder QR: `a = q r` with `q` of shape `m x k`, `r` of shape
/// `k x n`, and `k = min(m, n)`.
pub fn thin_qr(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = to_faer(a).qr();
    let q = qr.compute_thin_Q();
    (from_faer(q.as_ref()), from_faer(qr.thin_R()))
}
