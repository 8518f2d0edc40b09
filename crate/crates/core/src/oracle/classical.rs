//! Classical Kalman filter and finite-horizon controller.
//!
//! Filter learning: `K_t = P⁻H'(HP⁻H' + R)⁻¹`, `P⁻_{t+1} = F(I - K_t H)P⁻F' + Q`.
//! Filter execution: `x̂_t = x̂⁻_t + K_t(y_t - Hx̂⁻_t)`, `x̂⁻_{t+1} = Fx̂_t + Bu_t`.
//! Controller: backward recursion from `S_N = r` with
//! `L = (B'SB + g)⁻¹B'SF`, `S_prev = (F' - L'B')SF + r`; the gain applied at
//! time `t` is the one computed from `S_{t+1}`.
//!
//! Every covariance update is symmetrized; solves go through Cholesky.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lds::{LdsModel, Trajectory};
use crate::linalg::{chol_solve, spd_factor, symmetrize};

/// Filter state. `gain` and `p_minus` refer to different instants on
/// purpose: after [`kf_learn_step`], `gain` is `K_t` (usable for executing
/// step `t`) while `p_minus` has already advanced to `P⁻_{t+1}`.
#[derive(Debug, Clone)]
pub struct KfState {
    pub gain: DMatrix<f64>,
    pub p_minus: DMatrix<f64>,
    pub xhat: DVector<f64>,
    pub xhat_minus: DVector<f64>,
    pub t: usize,
}

impl KfState {
    pub fn new(p_minus0: DMatrix<f64>, xhat_minus0: DVector<f64>) -> Self {
        let dx = p_minus0.nrows();
        Self {
            gain: DMatrix::zeros(dx, 0),
            p_minus: p_minus0,
            xhat: DVector::zeros(xhat_minus0.len()),
            xhat_minus: xhat_minus0,
            t: 0,
        }
    }
}

/// One pass of the gain/covariance ("learning") recursion.
pub fn kf_learn_step(model: &LdsModel, state: &KfState) -> Result<KfState> {
    let h = &model.h;
    let p = symmetrize(&state.p_minus);
    let s = symmetrize(&(h * &p * h.transpose() + &model.r_true));
    let l = spd_factor(&s).map_err(|e| {
        Error::Singular(format!("innovation covariance HP⁻H' + R not invertible: {e}"))
    })?;
    // K = P⁻H'S⁻¹ = (S⁻¹ H P⁻)'
    let k = chol_solve(&l, &(h * &p)).transpose();
    let ikh = DMatrix::identity(model.dx(), model.dx()) - &k * h;
    let p_next = symmetrize(&(&model.f * ikh * &p * model.f.transpose() + &model.q));
    debug_assert!(
        crate::linalg::min_sym_eigenvalue(&p_next) > -1e-10 * p_next.norm().max(1.0),
        "prior covariance lost positive semidefiniteness"
    );
    Ok(KfState {
        gain: k,
        p_minus: p_next,
        xhat: state.xhat.clone(),
        xhat_minus: state.xhat_minus.clone(),
        t: state.t,
    })
}

/// One pass of the estimate ("execution") recursion, consuming the gain
/// computed by the latest [`kf_learn_step`].
pub fn kf_execute_step(
    model: &LdsModel,
    state: &KfState,
    y: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<KfState> {
    if state.gain.ncols() != model.dy() {
        return Err(Error::Mode(
            "kf_execute_step requires a gain from kf_learn_step".into(),
        ));
    }
    if y.len() != model.dy() || u.len() != model.du() {
        return Err(Error::Dimension("measurement/control length mismatch".into()));
    }
    let innovation = y - &model.h * &state.xhat_minus;
    let xhat = &state.xhat_minus + &state.gain * innovation;
    let xhat_minus = &model.f * &xhat + &model.b * u;
    Ok(KfState {
        gain: state.gain.clone(),
        p_minus: state.p_minus.clone(),
        xhat,
        xhat_minus,
        t: state.t + 1,
    })
}

/// Finite-horizon controller schedule. `gains[i]` is the gain applied at
/// time `t0 + i` (computed from `S_{t0+i+1}`); `s_path[j]` is `S_{t0+j}`,
/// ending with `S_N = r`.
#[derive(Debug, Clone)]
pub struct KcSchedule {
    pub gains: Vec<DMatrix<f64>>,
    pub s_path: Vec<DMatrix<f64>>,
    pub n: usize,
    pub t0: usize,
}

impl KcSchedule {
    /// Gain for time step `t`, valid for `t0 <= t < n`.
    pub fn gain(&self, t: usize) -> Result<&DMatrix<f64>> {
        if t < self.t0 || t >= self.n {
            return Err(Error::Schedule(t));
        }
        Ok(&self.gains[t - self.t0])
    }

    /// `S_tau` for `t0 <= tau <= n`.
    pub fn s_at(&self, tau: usize) -> Result<&DMatrix<f64>> {
        if tau < self.t0 || tau > self.n {
            return Err(Error::Schedule(tau));
        }
        Ok(&self.s_path[tau - self.t0])
    }
}

/// Backward recursion for the control gains over `[t0, n]`.
pub fn kc_backward(model: &LdsModel, n: usize, t0: usize) -> Result<KcSchedule> {
    if n <= t0 {
        return Err(Error::Parameter("horizon N must exceed t0".into()));
    }
    let f = &model.f;
    let b = &model.b;
    let mut s = model.r_cost.clone();
    let mut gains_rev: Vec<DMatrix<f64>> = Vec::with_capacity(n - t0);
    let mut s_rev: Vec<DMatrix<f64>> = vec![s.clone()];
    for _tau in ((t0 + 1)..=n).rev() {
        let m = symmetrize(&(b.transpose() * &s * b + &model.g));
        let lm = spd_factor(&m)
            .map_err(|e| Error::Singular(format!("B'SB + g not invertible: {e}")))?;
        let gain = chol_solve(&lm, &(b.transpose() * &s * f));
        s = symmetrize(&((f.transpose() - gain.transpose() * b.transpose()) * &s * f + &model.r_cost));
        gains_rev.push(gain);
        s_rev.push(s.clone());
    }
    gains_rev.reverse();
    s_rev.reverse();
    Ok(KcSchedule {
        gains: gains_rev,
        s_path: s_rev,
        n,
        t0,
    })
}

/// Realized cost `Σ_{t0}^{N-1}(u'gu + x'rx) + x_N'r x_N` for one trajectory.
/// With `controls = None` the trajectory's own control sequence is used,
/// otherwise `controls[t - t0]` is taken.
pub fn evaluate_cost(
    trajectory: &Trajectory,
    controls: Option<&[DVector<f64>]>,
    model: &LdsModel,
    t0: usize,
    n: usize,
) -> Result<f64> {
    if trajectory.len() <= n {
        return Err(Error::Parameter(format!(
            "trajectory of length {} does not cover [t0, N] = [{t0}, {n}]",
            trajectory.len()
        )));
    }
    let mut j = 0.0;
    for t in t0..n {
        let u = match controls {
            Some(us) => us.get(t - t0).ok_or_else(|| {
                Error::Parameter("control sequence shorter than horizon".into())
            })?,
            None => &trajectory.controls[t],
        };
        let x = &trajectory.states[t].x;
        j += (u.transpose() * &model.g * u)[(0, 0)];
        j += (x.transpose() * &model.r_cost * x)[(0, 0)];
    }
    let xn = &trajectory.states[n].x;
    j += (xn.transpose() * &model.r_cost * xn)[(0, 0)];
    Ok(j)
}
