//! Learned representations of a covariance matrix whose inverse must be
//! applied to activity vectors.
//!
//! Two interchangeable forms are supported:
//!
//! - **Series**: a lateral connection matrix `M̃ = I - cM` with scalar `c`;
//!   `M⁻¹v` is evaluated by iterating passes of the convergent series
//!   `c(v + M̃v + M̃²v + ...)`. `c` is refreshed to `1/trace(M)` after each
//!   update so the series condition (eigenvalues of `M̃` inside the unit
//!   circle) holds whenever `M` stays positive definite.
//! - **Inverse**: the inverse itself is the connection matrix, updated by
//!   `M⁻¹ <- (1+γ)M⁻¹ - γ <vv'>` with `v = M⁻¹s`, kept symmetric by fiat.
//!
//! Both learn from sample second moments and share the fixed point
//! `<ss'> = M`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, spectral_radius_sym, sym_eigenvalues, symmetrize};

/// Which representation to use, with the series iteration budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RepMethod {
    Series { passes: usize, tol: f64 },
    Inverse,
}

impl RepMethod {
    /// Defaults: 50 passes at relative tolerance 1e-8.
    pub fn series_default() -> Self {
        RepMethod::Series {
            passes: 50,
            tol: 1e-8,
        }
    }
}

/// A learned covariance representation.
#[derive(Debug, Clone)]
pub enum CovarianceRep {
    Series {
        /// `M̃ = I - scale * M`.
        coupling: DMatrix<f64>,
        scale: f64,
        passes: usize,
        tol: f64,
    },
    Inverse {
        inv: DMatrix<f64>,
    },
}

/// Evaluate `c (I - M̃)⁻¹ v` by iterated passes through the lateral matrix,
/// stopping once the latest term is below `tol` times the accumulated sum.
/// Series growth (spectral radius at or above one) is reported as divergence.
pub fn series_apply_inverse(
    coupling: &DMatrix<f64>,
    scale: f64,
    v: &DVector<f64>,
    passes: usize,
    tol: f64,
) -> Result<DVector<f64>> {
    let v_norm = v.norm();
    if v_norm == 0.0 {
        return Ok(DVector::zeros(v.len()));
    }
    let mut term = v.clone();
    let mut sum = v.clone();
    for pass in 1..=passes {
        term = coupling * term;
        sum += &term;
        let t_norm = term.norm();
        if t_norm > 4.0 * v_norm {
            return Err(Error::Diverged(format!(
                "series grew to {:.3e}x the input after {pass} passes; \
                 coupling spectral radius is at or above one",
                t_norm / v_norm
            )));
        }
        if t_norm < tol * sum.norm() {
            return Ok(sum * scale);
        }
    }
    Err(Error::NoConvergence {
        passes,
        residual: term.norm() / sum.norm().max(1e-300),
    })
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged(
            "inverse representation overflowed; the learning rate is far too              large for the sample scale"
                .into(),
        ))
    }
}

impl CovarianceRep {
    /// Represent a given positive definite matrix.
    pub fn from_matrix(cov: &DMatrix<f64>, method: RepMethod) -> Result<Self> {
        let n = cov.nrows();
        if cov.ncols() != n {
            return Err(Error::Dimension("covariance must be square".into()));
        }
        match method {
            RepMethod::Series { passes, tol } => {
                let tr = cov.trace();
                if tr <= 0.0 {
                    return Err(Error::Parameter(
                        "series representation needs positive trace".into(),
                    ));
                }
                let scale = 1.0 / tr;
                let coupling = DMatrix::identity(n, n) - cov * scale;
                let rep = CovarianceRep::Series {
                    coupling,
                    scale,
                    passes,
                    tol,
                };
                rep.check_series_condition()?;
                Ok(rep)
            }
            RepMethod::Inverse => Ok(CovarianceRep::Inverse {
                inv: spd_inverse(cov)?,
            }),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            CovarianceRep::Series { coupling, .. } => coupling.nrows(),
            CovarianceRep::Inverse { inv } => inv.nrows(),
        }
    }

    /// Apply the represented inverse to a vector. For the series form this
    /// iterates lateral passes; for the inverse form it is a single pass.
    pub fn apply_inverse(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            CovarianceRep::Series {
                coupling,
                scale,
                passes,
                tol,
            } => series_apply_inverse(coupling, *scale, v, *passes, *tol),
            CovarianceRep::Inverse { inv } => Ok(inv * v),
        }
    }

    /// The represented covariance.
    pub fn matrix(&self) -> Result<DMatrix<f64>> {
        match self {
            CovarianceRep::Series {
                coupling, scale, ..
            } => {
                let n = coupling.nrows();
                Ok((DMatrix::identity(n, n) - coupling) / *scale)
            }
            CovarianceRep::Inverse { inv } => spd_inverse(inv),
        }
    }

    /// The represented inverse as an explicit matrix (diagnostics only).
    pub fn inverse_matrix(&self) -> Result<DMatrix<f64>> {
        match self {
            CovarianceRep::Series { .. } => spd_inverse(&self.matrix()?),
            CovarianceRep::Inverse { inv } => Ok(inv.clone()),
        }
    }

    /// One update from a batch of samples: the forgetting/Hebbian rule with
    /// the batch mean `<ss'>` at rate `gamma`.
    pub fn learn_batch(&mut self, samples: &[DVector<f64>], gamma: f64) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Parameter("empty sample batch".into()));
        }
        match self {
            CovarianceRep::Series { .. } => {
                let n = self.dim();
                let mut moment = DMatrix::zeros(n, n);
                for s in samples {
                    moment += s * s.transpose();
                }
                moment /= samples.len() as f64;
                self.series_update(&moment, gamma)
            }
            CovarianceRep::Inverse { inv } => {
                let n = inv.nrows();
                let mut moment = DMatrix::zeros(n, n);
                for s in samples {
                    let v = &*inv * s;
                    moment += &v * v.transpose();
                }
                moment /= samples.len() as f64;
                *inv = symmetrize(&((&*inv * (1.0 + gamma)) - moment * gamma));
                check_finite(inv)
            }
        }
    }

    /// Incremental updates, one sample at a time at rate `gamma` each. For
    /// the inverse form, each pass vector is computed with the inverse as
    /// already updated by the previous sample.
    pub fn learn_incremental(&mut self, samples: &[DVector<f64>], gamma: f64) -> Result<()> {
        for s in samples {
            self.learn_one(s, gamma)?;
        }
        Ok(())
    }

    /// Single-sample update.
    pub fn learn_one(&mut self, sample: &DVector<f64>, gamma: f64) -> Result<()> {
        match self {
            CovarianceRep::Series { .. } => {
                let moment = sample * sample.transpose();
                self.series_update(&moment, gamma)
            }
            CovarianceRep::Inverse { inv } => {
                let v = &*inv * sample;
                *inv = symmetrize(&((&*inv * (1.0 + gamma)) - &v * v.transpose() * gamma));
                check_finite(inv)
            }
        }
    }

    /// `M̃' = (1-γ)M̃ + γI - γc <ss'>`, then refresh `c = 1/trace(M)` and
    /// verify the series condition still holds.
    fn series_update(&mut self, moment: &DMatrix<f64>, gamma: f64) -> Result<()> {
        let CovarianceRep::Series {
            coupling, scale, ..
        } = self
        else {
            unreachable!()
        };
        let n = coupling.nrows();
        let eye = DMatrix::identity(n, n);
        let updated = &*coupling * (1.0 - gamma) + &eye * gamma - moment * (gamma * *scale);
        // Recover M, re-center the scale on the new trace.
        let m = (&eye - &updated) / *scale;
        let tr = m.trace();
        if tr <= 0.0 {
            return Err(Error::Diverged(
                "learned covariance lost positive trace".into(),
            ));
        }
        *scale = 1.0 / tr;
        *coupling = eye - m * *scale;
        self.check_series_condition()
    }

    fn check_series_condition(&self) -> Result<()> {
        if let CovarianceRep::Series { coupling, .. } = self {
            let rho = spectral_radius_sym(coupling);
            if rho >= 1.0 {
                return Err(Error::Diverged(format!(
                    "coupling spectral radius {rho:.6} is not inside the unit circle; \
                     learned covariance is no longer positive definite"
                )));
            }
        }
        Ok(())
    }

    /// Asymmetry of the stored connection matrix, relative to its norm.
    pub fn symmetry_defect(&self) -> f64 {
        let m = match self {
            CovarianceRep::Series { coupling, .. } => coupling,
            CovarianceRep::Inverse { inv } => inv,
        };
        (m - m.transpose()).norm() / m.norm().max(1e-300)
    }

    /// Smallest eigenvalue of the represented covariance (diagnostics).
    pub fn min_eigenvalue(&self) -> Result<f64> {
        Ok(sym_eigenvalues(&self.matrix()?).min())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd2(a: f64, b: f64, c: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[a, c, c, b])
    }

    /// Batch whose sample second moment is exactly `cov`: scaled columns of
    /// the Cholesky factor.
    fn exact_batch(cov: &DMatrix<f64>) -> Vec<DVector<f64>> {
        let n = cov.nrows();
        let l = crate::linalg::psd_factor(cov).unwrap();
        (0..n)
            .map(|j| {
                let col = l.column(j) * (n as f64).sqrt();
                DVector::from_column_slice(col.as_slice())
            })
            .collect()
    }

    #[test]
    fn identity_with_unit_scale_needs_one_pass() {
        // Z = I with c = 1 gives a zero coupling matrix.
        let eta = DVector::from_vec(vec![0.4, -1.0]);
        let out = series_apply_inverse(&DMatrix::zeros(2, 2), 1.0, &eta, 1, 1e-12).unwrap();
        assert!((out - eta).norm() < 1e-15);
    }

    #[test]
    fn series_matches_closed_form_diagonal_inverse() {
        let z = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let coupling = DMatrix::identity(2, 2) - &z / 6.0;
        let eta = DVector::from_vec(vec![0.9, -0.3]);
        let out = series_apply_inverse(&coupling, 1.0 / 6.0, &eta, 100, 1e-14).unwrap();
        assert!((out[0] - 0.9 / 2.0).abs() < 1e-10);
        assert!((out[1] + 0.3 / 4.0).abs() < 1e-10);
    }

    #[test]
    fn series_reports_divergence_when_condition_violated() {
        // c * lambda_max = 0.5 * 9 > 2: eigenvalue of the coupling below -1.
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 9.0]);
        let coupling = DMatrix::identity(2, 2) - &z * 0.5;
        let eta = DVector::from_vec(vec![1.0, 1.0]);
        let err = series_apply_inverse(&coupling, 0.5, &eta, 100, 1e-10).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)), "got {err}");
    }

    #[test]
    fn series_apply_matches_direct_solve() {
        let z = spd2(3.0, 1.5, 0.4);
        let rep = CovarianceRep::from_matrix(&z, RepMethod::series_default()).unwrap();
        let v = DVector::from_vec(vec![1.0, 2.0]);
        let direct = crate::linalg::spd_solve_vec(&z, &v).unwrap();
        let series = rep.apply_inverse(&v).unwrap();
        assert!((direct - series).norm() < 1e-7);
    }

    #[test]
    fn both_rules_have_exact_fixed_points() {
        let z = spd2(2.0, 1.0, 0.3);
        let batch = exact_batch(&z);

        let mut rep = CovarianceRep::from_matrix(&z, RepMethod::series_default()).unwrap();
        rep.learn_batch(&batch, 0.37).unwrap();
        assert!((rep.matrix().unwrap() - &z).norm() < 1e-12);

        let mut rep = CovarianceRep::from_matrix(&z, RepMethod::Inverse).unwrap();
        let zinv = spd_inverse(&z).unwrap();
        rep.learn_batch(&batch, 0.02).unwrap();
        assert!((rep.inverse_matrix().unwrap() - &zinv).norm() < 1e-12);
    }

    #[test]
    fn zero_rate_freezes_representation() {
        let z = spd2(1.0, 2.0, 0.0);
        let samples: Vec<DVector<f64>> =
            vec![DVector::from_vec(vec![5.0, 1.0]), DVector::from_vec(vec![0.1, 3.0])];
        for method in [RepMethod::series_default(), RepMethod::Inverse] {
            let mut rep = CovarianceRep::from_matrix(&z, method).unwrap();
            let before = rep.matrix().unwrap();
            rep.learn_batch(&samples, 0.0).unwrap();
            assert!((rep.matrix().unwrap() - before).norm() < 1e-12);
        }
    }

    #[test]
    fn inverse_rep_overflow_is_reported() {
        // A rate appropriate near the fixed point, applied with the
        // representation four orders of magnitude off, blows up doubly
        // exponentially; that must surface as an error, not NaN.
        let z = DMatrix::identity(2, 2) * 1e-4;
        let mut rep = CovarianceRep::from_matrix(&z, RepMethod::Inverse).unwrap();
        let s = DVector::from_vec(vec![2.5, 0.0]);
        let mut saw_error = false;
        for _ in 0..60 {
            if rep.learn_one(&s, 0.03).is_err() {
                saw_error = true;
                break;
            }
        }
        assert!(saw_error);
    }

    #[test]
    fn inverse_rep_stays_symmetric() {
        let z = spd2(0.5, 1.5, 0.2);
        let mut rep = CovarianceRep::from_matrix(&z, RepMethod::Inverse).unwrap();
        let mut rng = crate::rng::RngStream::new(5, 0);
        for _ in 0..500 {
            let s = rng.normal_vector(2);
            rep.learn_one(&s, 0.01).unwrap();
            assert!(rep.symmetry_defect() < 1e-10);
        }
    }

    #[test]
    fn batch_learning_tracks_sample_moment() {
        // gamma = 1 replaces the series-form covariance with the batch moment.
        let z0 = spd2(1.0, 1.0, 0.0);
        let target = spd2(3.0, 0.5, 0.1);
        let batch = exact_batch(&target);
        let mut rep = CovarianceRep::from_matrix(&z0, RepMethod::series_default()).unwrap();
        rep.learn_batch(&batch, 1.0).unwrap();
        assert!((rep.matrix().unwrap() - &target).norm() < 1e-12);
    }
}
