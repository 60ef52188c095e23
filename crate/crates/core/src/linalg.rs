//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::{PricingError, Result};

/// Length of `vech(M)` for a square matrix of side `n`.
pub fn vech_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Stacks the on-and-below-diagonal elements of a square matrix column by column.
pub fn vech(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut out = DVector::zeros(vech_len(n));
    let mut idx = 0;
    for j in 0..n {
        for i in j..n {
            out[idx] = m[(i, j)];
            idx += 1;
        }
    }
    out
}

/// Inverse of [`vech`] producing a symmetric matrix.
pub fn unvech(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), vech_len(n), "unvech: length mismatch");
    let mut out = DMatrix::zeros(n, n);
    let mut idx = 0;
    for j in 0..n {
        for i in j..n {
            out[(i, j)] = v[idx];
            out[(j, i)] = v[idx];
            idx += 1;
        }
    }
    out
}

/// Replaces `m` with `(m + m') / 2`, erroring if the asymmetry exceeds `tol`.
pub fn symmetrize(m: &mut DMatrix<f64>, tol: f64, context: &str) -> Result<()> {
    let n = m.nrows();
    let scale = m.amax().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = m[(i, j)];
            let b = m[(j, i)];
            if (a - b).abs() > tol * scale {
                return Err(PricingError::ShapeMismatch {
                    context: format!(
                        "{context}: asymmetry {:.3e} at ({i},{j}) exceeds {tol:.1e}",
                        (a - b).abs()
                    ),
                });
            }
            let avg = 0.5 * (a + b);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    Ok(())
}

/// Cholesky factorization that reports failures as covariance errors.
pub fn spd_cholesky(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| PricingError::NonPositiveDefiniteCovariance {
        context: context.to_string(),
    })
}

/// Block-diagonal matrix from square blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let total: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(total, total);
    let mut off = 0;
    for b in blocks {
        out.view_mut((off, off), (b.nrows(), b.ncols())).copy_from(b);
        off += b.nrows();
    }
    out
}

/// Orthogonal projection of `u` onto the null space of the full-row-rank
/// matrix `a`: `u - A'(AA')^{-1}Au`.
pub fn null_space_project(a: &DMatrix<f64>, u: &DVector<f64>) -> DVector<f64> {
    let gram = a * a.transpose();
    let chol = Cholesky::new(gram).expect("null_space_project: A must have full row rank");
    u - a.transpose() * chol.solve(&(a * u))
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal cumulative distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    // Unwrap is fine: the standard normal always constructs.
    let n = Normal::new(0.0, 1.0).unwrap();
    n.cdf(x)
}
