//! Exact measurement-space recursions.
//!
//! With `F̃ = HFH⁺` and `Z_t = HP⁻_tH' + R`, the covariance recursion becomes
//! `Z' = F̃(I - RZ⁻¹)RF̃' + HQH' + R` and the blending matrix is
//! `I - HK = RZ⁻¹`. On the control side, `T_τ = H'⁺S_τH⁺ + g̃` obeys
//! `T_prev = F̃'g̃(I - T⁻¹g̃)F̃ + r̃ + g̃` and the control gain is
//! `L̃ = (-I + T⁻¹g̃)F̃`. These paths are what the learners approximate, and
//! they agree with the classical recursions whenever `H` has full row rank.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lds::LdsModel;
use crate::linalg::{pseudo_inverse, spd_solve, symmetrize};

/// Rank information from the pseudoinverse maps.
#[derive(Debug, Clone)]
pub struct RankReport {
    pub h_rank: usize,
    pub h_rows: usize,
    pub b_rank: usize,
    pub b_cols: usize,
}

impl RankReport {
    /// Full row rank of `H` is what the equivalence identities require.
    pub fn h_full_row_rank(&self) -> bool {
        self.h_rank == self.h_rows
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !self.h_full_row_rank() {
            w.push(format!(
                "H is row-rank deficient (rank {} of {}); measurement-space \
                 equivalence identities are not guaranteed",
                self.h_rank, self.h_rows
            ));
        }
        if self.b_rank < self.b_cols {
            w.push(format!(
                "B is column-rank deficient (rank {} of {}); control-cost \
                 transform uses the pseudoinverse projection",
                self.b_rank, self.b_cols
            ));
        }
        w
    }
}

/// Measurement-space quantities derived from an [`LdsModel`].
#[derive(Debug, Clone)]
pub struct TransformedModel {
    /// `F̃ = HFH⁺` (Dy x Dy).
    pub f_tilde: DMatrix<f64>,
    /// `HQH'` (Dy x Dy).
    pub hqh: DMatrix<f64>,
    /// Measurement noise covariance `R` (Dy x Dy).
    pub r: DMatrix<f64>,
    /// `g̃ = H'⁺B'⁺ g B⁺H⁺` (Dy x Dy).
    pub g_tilde: DMatrix<f64>,
    /// `r̃ = H'⁺ r H⁺` (Dy x Dy).
    pub r_tilde: DMatrix<f64>,
    /// `HB` (Dy x Du), the map from plant control to measurement-space control.
    pub hb: DMatrix<f64>,
    /// `(HB)⁺`, used to actuate the plant from a measurement-space control.
    pub hb_pinv: DMatrix<f64>,
    pub rank_report: RankReport,
}

impl TransformedModel {
    /// `ũ = HB u`.
    pub fn u_tilde_of(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.hb * u
    }

    /// `u = (HB)⁺ ũ`, the plant-side adapter for a measurement-space control.
    pub fn plant_control(&self, u_tilde: &DVector<f64>) -> DVector<f64> {
        &self.hb_pinv * u_tilde
    }

    pub fn dy(&self) -> usize {
        self.f_tilde.nrows()
    }
}

/// Compute the measurement-space model. Pseudoinverses use the SVD cutoff
/// from [`crate::linalg::SVD_RTOL`]; rank deficiencies are reported, not
/// rejected.
pub fn derive_transformed(model: &LdsModel) -> Result<TransformedModel> {
    let h = &model.h;
    let h_pinv = pseudo_inverse(h)?;
    let b_pinv = pseudo_inverse(&model.b)?;
    let rank_report = RankReport {
        h_rank: h_pinv.rank,
        h_rows: h.nrows(),
        b_rank: b_pinv.rank,
        b_cols: model.b.ncols(),
    };

    let f_tilde = h * &model.f * &h_pinv.m;
    let hqh = symmetrize(&(h * &model.q * h.transpose()));
    // g̃ = (B⁺H⁺)' g (B⁺H⁺);  r̃ = (H⁺)' r H⁺
    let bh = &b_pinv.m * &h_pinv.m;
    let g_tilde = symmetrize(&(bh.transpose() * &model.g * &bh));
    let r_tilde = symmetrize(&(h_pinv.m.transpose() * &model.r_cost * &h_pinv.m));
    let hb = h * &model.b;
    let hb_pinv = pseudo_inverse(&hb)?.m;
    Ok(TransformedModel {
        f_tilde,
        hqh,
        r: model.r_true.clone(),
        g_tilde,
        r_tilde,
        hb,
        hb_pinv,
        rank_report,
    })
}

/// `Z' = F̃(I - RZ⁻¹)RF̃' + HQH' + R`, symmetrized.
pub fn z_step(tm: &TransformedModel, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    // (I - RZ⁻¹)R = R - (Z⁻¹R)'R
    let zr = spd_solve(z, &tm.r).map_err(|e| Error::Singular(format!("Z: {e}")))?;
    let core = &tm.r - zr.transpose() * &tm.r;
    Ok(symmetrize(
        &(&tm.f_tilde * core * tm.f_tilde.transpose() + &tm.hqh + &tm.r),
    ))
}

/// `T_prev = F̃'g̃(I - T⁻¹g̃)F̃ + r̃ + g̃`, symmetrized.
pub fn t_step(tm: &TransformedModel, t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    // g̃(I - T⁻¹g̃) = g̃ - g̃ T⁻¹ g̃
    let tg = spd_solve(t, &tm.g_tilde).map_err(|e| Error::Singular(format!("T: {e}")))?;
    let core = &tm.g_tilde - &tm.g_tilde * tg;
    Ok(symmetrize(
        &(tm.f_tilde.transpose() * core * &tm.f_tilde + &tm.r_tilde + &tm.g_tilde),
    ))
}

/// `RZ⁻¹`, i.e. `I - HK`.
pub fn gain_from_z(r: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let zr = spd_solve(z, r).map_err(|e| Error::Singular(format!("Z: {e}")))?;
    Ok(zr.transpose())
}

/// `L̃ = (-I + T⁻¹g̃)F̃`; the control is `ũ = L̃ŷ`.
pub fn control_gain_from_t(tm: &TransformedModel, t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let tg = spd_solve(t, &tm.g_tilde).map_err(|e| Error::Singular(format!("T: {e}")))?;
    let dy = tm.dy();
    Ok((tg - DMatrix::identity(dy, dy)) * &tm.f_tilde)
}
