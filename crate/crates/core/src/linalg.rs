//! Dense linear-algebra helpers: tolerant Cholesky factorizations, SPD solves,
//! SVD pseudoinverses, and small symmetric-eigenvalue utilities.
//!
//! All solves go through factorizations; explicit inverses are only formed
//! where a learned connection matrix genuinely represents an inverse.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot tolerance for semidefinite Cholesky: pivots below
/// `PSD_PIVOT_RTOL * max(diag)` are treated as exactly zero.
pub const PSD_PIVOT_RTOL: f64 = 1e-12;

/// Relative singular-value cutoff for pseudoinverses.
pub const SVD_RTOL: f64 = 1e-12;

/// Relative diagonal ratio below which an SPD factor is declared singular.
pub const SPD_SINGULAR_RTOL: f64 = 1e-12;

/// `(m + m') / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = m.transpose();
    s += m;
    s *= 0.5;
    s
}

/// Symmetry check with a tolerance relative to the largest entry.
pub fn is_symmetric(m: &DMatrix<f64>, rtol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(1e-300);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > rtol * scale {
                return false;
            }
        }
    }
    true
}

/// Lower-triangular Cholesky factor of a symmetric positive *semi*definite
/// matrix. Pivots within tolerance of zero produce an all-zero column, so the
/// factor of a singular covariance generates noise only in the spanned
/// directions. Fails on asymmetric or indefinite input.
pub fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(Error::Dimension(format!(
            "covariance must be square, got {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if !is_symmetric(cov, 1e-9) {
        return Err(Error::Parameter("covariance is not symmetric".into()));
    }
    let max_diag = (0..n).map(|i| cov[(i, i)]).fold(0.0_f64, f64::max);
    if max_diag < 0.0 {
        return Err(Error::Parameter(
            "covariance has a negative diagonal".into(),
        ));
    }
    let tol = PSD_PIVOT_RTOL * max_diag;
    let off_tol = (PSD_PIVOT_RTOL.sqrt() * max_diag).max(1e-300);
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = cov[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= tol {
            if d < -tol {
                return Err(Error::Parameter(
                    "covariance is not positive semidefinite".into(),
                ));
            }
            // Zero pivot: the column must be (numerically) zero too.
            for i in (j + 1)..n {
                let mut s = cov[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > off_tol {
                    return Err(Error::Parameter(
                        "covariance is not positive semidefinite".into(),
                    ));
                }
            }
            continue;
        }
        let piv = d.sqrt();
        l[(j, j)] = piv;
        for i in (j + 1)..n {
            let mut s = cov[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / piv;
        }
    }
    Ok(l)
}

/// Strict Cholesky factor of a symmetric positive definite matrix.
/// The singularity threshold is `SPD_SINGULAR_RTOL` times the largest
/// diagonal of the factor.
pub fn spd_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension(format!(
            "matrix must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut max_piv = 0.0_f64;
    let mut min_piv = f64::INFINITY;
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 {
            return Err(Error::Singular(format!(
                "nonpositive pivot {d:.3e} at column {j}"
            )));
        }
        let piv = d.sqrt();
        max_piv = max_piv.max(piv);
        min_piv = min_piv.min(piv);
        l[(j, j)] = piv;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / piv;
        }
    }
    if min_piv < SPD_SINGULAR_RTOL * max_piv {
        return Err(Error::Singular(format!(
            "factor diagonal ratio {:.3e} below threshold",
            min_piv / max_piv
        )));
    }
    Ok(l)
}

/// Solve `L L' X = B` given a lower-triangular factor `L`.
pub fn chol_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let m = b.ncols();
    let mut x = b.clone();
    // Forward: L Y = B
    for col in 0..m {
        for i in 0..n {
            let mut s = x[(i, col)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = s / l[(i, i)];
        }
    }
    // Backward: L' X = Y
    for col in 0..m {
        for i in (0..n).rev() {
            let mut s = x[(i, col)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, col)];
            }
            x[(i, col)] = s / l[(i, i)];
        }
    }
    x
}

/// Solve `A X = B` for symmetric positive definite `A`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = spd_factor(&symmetrize(a))?;
    Ok(chol_solve(&l, b))
}

/// Solve `A x = b` for symmetric positive definite `A`.
pub fn spd_solve_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let bm = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let x = spd_solve(a, &bm)?;
    Ok(DVector::from_column_slice(x.as_slice()))
}

/// Explicit inverse of a symmetric positive definite matrix.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let inv = spd_solve(a, &DMatrix::identity(n, n))?;
    Ok(symmetrize(&inv))
}

/// Moore-Penrose pseudoinverse with rank report.
#[derive(Debug, Clone)]
pub struct PseudoInverse {
    pub m: DMatrix<f64>,
    pub rank: usize,
    /// Cutoff actually applied: `SVD_RTOL * sigma_max`.
    pub tol: f64,
}

/// Pseudoinverse via SVD; singular values below `SVD_RTOL * sigma_max`
/// are treated as zero.
pub fn pseudo_inverse(a: &DMatrix<f64>) -> Result<PseudoInverse> {
    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let tol = SVD_RTOL * sigma_max;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank == 0 {
        return Ok(PseudoInverse {
            m: DMatrix::zeros(a.ncols(), a.nrows()),
            rank: 0,
            tol,
        });
    }
    let m = svd
        .pseudo_inverse(tol)
        .map_err(|e| Error::Singular(e.to_string()))?;
    Ok(PseudoInverse { m, rank, tol })
}

/// Eigenvalues of the symmetric part of `m`.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    nalgebra::SymmetricEigen::new(symmetrize(m)).eigenvalues
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).min()
}

/// Spectral radius of a symmetric matrix.
pub fn spectral_radius_sym(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).iter().fold(0.0_f64, |a, &x| a.max(x.abs()))
}

/// `||a - b||_F / max(||b||_F, floor)`.
pub fn rel_frobenius_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// 2-d counterclockwise rotation by `deg` degrees.
pub fn rotation2(deg: f64) -> DMatrix<f64> {
    let th = deg.to_radians();
    DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()])
}
