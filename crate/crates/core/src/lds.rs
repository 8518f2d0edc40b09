//! Linear dynamical system simulation.
//!
//! Plant:        `x_{t+1} = F x_t + B u_t + m_t`, `m_t ~ N(0, Q)`
//! Measurement:  `y_t = H x_t + n_t`,             `n_t ~ N(0, R)`
//!
//! Trajectories additionally record the ideal noiseless measurement
//! `Y_t = H x_t`, which only oracles and tests are allowed to consume.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, psd_factor, rotation2};
use crate::rng::{stream_id, RngStream};

/// Stream-id source tags used by the simulator.
pub const STREAM_INIT: u32 = 0;
pub const STREAM_PLANT: u32 = 1;
pub const STREAM_MEAS: u32 = 2;

/// Plant, measurement, and cost parameterization.
#[derive(Debug, Clone)]
pub struct LdsModel {
    /// State transition `F` (Dx x Dx).
    pub f: DMatrix<f64>,
    /// Control input map `B` (Dx x Du).
    pub b: DMatrix<f64>,
    /// Measurement map `H` (Dy x Dx).
    pub h: DMatrix<f64>,
    /// Plant noise covariance `Q` (Dx x Dx), symmetric PSD.
    pub q: DMatrix<f64>,
    /// Measurement noise covariance `R` (Dy x Dy), symmetric PSD.
    pub r_true: DMatrix<f64>,
    /// Control cost matrix `g` (Du x Du), symmetric PD.
    pub g: DMatrix<f64>,
    /// State cost matrix `r` (Dx x Dx), symmetric PD.
    pub r_cost: DMatrix<f64>,
}

impl LdsModel {
    pub fn new(
        f: DMatrix<f64>,
        b: DMatrix<f64>,
        h: DMatrix<f64>,
        q: DMatrix<f64>,
        r_true: DMatrix<f64>,
        g: DMatrix<f64>,
        r_cost: DMatrix<f64>,
    ) -> Result<Self> {
        let dx = f.nrows();
        if f.ncols() != dx {
            return Err(Error::Dimension("F must be square".into()));
        }
        if b.nrows() != dx {
            return Err(Error::Dimension("B rows must match Dx".into()));
        }
        let du = b.ncols();
        if h.ncols() != dx {
            return Err(Error::Dimension("H cols must match Dx".into()));
        }
        let dy = h.nrows();
        if q.shape() != (dx, dx) {
            return Err(Error::Dimension("Q must be Dx x Dx".into()));
        }
        if r_true.shape() != (dy, dy) {
            return Err(Error::Dimension("R must be Dy x Dy".into()));
        }
        if g.shape() != (du, du) {
            return Err(Error::Dimension("g must be Du x Du".into()));
        }
        if r_cost.shape() != (dx, dx) {
            return Err(Error::Dimension("r must be Dx x Dx".into()));
        }
        // Q, R symmetric PSD; g, r symmetric PD.
        psd_factor(&q).map_err(|e| Error::Parameter(format!("Q: {e}")))?;
        psd_factor(&r_true).map_err(|e| Error::Parameter(format!("R: {e}")))?;
        if !linalg::is_symmetric(&g, 1e-9) || linalg::spd_factor(&g).is_err() {
            return Err(Error::Parameter("g must be symmetric positive definite".into()));
        }
        if !linalg::is_symmetric(&r_cost, 1e-9) || linalg::spd_factor(&r_cost).is_err() {
            return Err(Error::Parameter("r must be symmetric positive definite".into()));
        }
        Ok(Self {
            f,
            b,
            h,
            q,
            r_true,
            g,
            r_cost,
        })
    }

    pub fn dx(&self) -> usize {
        self.f.nrows()
    }

    pub fn du(&self) -> usize {
        self.b.ncols()
    }

    pub fn dy(&self) -> usize {
        self.h.nrows()
    }

    /// 2-d benchmark plant: `F` and `H` are counterclockwise rotations,
    /// `Q = q I`, `R = rho I`, `B = I`, unit cost matrices.
    pub fn planar_rotations(f_deg: f64, h_deg: f64, q: f64, rho: f64) -> Self {
        let eye = DMatrix::identity(2, 2);
        Self::new(
            rotation2(f_deg),
            eye.clone(),
            rotation2(h_deg),
            &eye * q,
            &eye * rho,
            eye.clone(),
            eye.clone(),
        )
        .expect("valid rotation model")
    }
}

/// Plant state at a discrete time.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub x: DVector<f64>,
    pub t: usize,
}

/// Initial-state distribution `x_0 ~ N(mean, cov)`.
#[derive(Debug, Clone)]
pub struct InitialState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl InitialState {
    /// Default `mean = (1, 0, ...)`, `cov = I`.
    pub fn default_for(dx: usize) -> Self {
        let mut mean = DVector::zeros(dx);
        if dx > 0 {
            mean[0] = 1.0;
        }
        Self {
            mean,
            cov: DMatrix::identity(dx, dx),
        }
    }

    pub fn draw(&self, rng: &mut RngStream) -> Result<DVector<f64>> {
        Ok(&self.mean + sample_gaussian(&self.cov, rng)?)
    }
}

/// One simulated rollout. All sequences have equal length; entry `t` holds
/// the state, its noisy and ideal measurements, and the control applied
/// between `t` and `t+1` (zero-padded at the end).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<PlantState>,
    pub measurements: Vec<DVector<f64>>,
    pub ideal_measurements: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Draw from `N(0, cov)` as `L z` with `L` the tolerant Cholesky factor of
/// `cov` and `z` standard normal. Singular covariances produce zero noise in
/// the null directions; `cov = 0` always returns the zero vector.
pub fn sample_gaussian(cov: &DMatrix<f64>, rng: &mut RngStream) -> Result<DVector<f64>> {
    let l = psd_factor(cov)?;
    Ok(&l * rng.normal_vector(cov.nrows()))
}

/// Reusable sampler that factors the covariance once.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            factor: psd_factor(cov)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn draw(&self, rng: &mut RngStream) -> DVector<f64> {
        &self.factor * rng.normal_vector(self.dim())
    }
}

/// `x' = F x + B u + m`, `m ~ N(0, Q)`; advances the time index.
pub fn step_plant(
    model: &LdsModel,
    s: &PlantState,
    u: &DVector<f64>,
    rng: &mut RngStream,
) -> Result<PlantState> {
    if s.x.len() != model.dx() {
        return Err(Error::Dimension("state length must match Dx".into()));
    }
    if u.len() != model.du() {
        return Err(Error::Dimension("control length must match Du".into()));
    }
    let m = sample_gaussian(&model.q, rng)?;
    Ok(PlantState {
        x: &model.f * &s.x + &model.b * u + m,
        t: s.t + 1,
    })
}

/// `y = H x + n`, `n ~ N(0, R)`.
pub fn measure(model: &LdsModel, s: &PlantState, rng: &mut RngStream) -> Result<DVector<f64>> {
    if s.x.len() != model.dx() {
        return Err(Error::Dimension("state length must match Dx".into()));
    }
    let n = sample_gaussian(&model.r_true, rng)?;
    Ok(&model.h * &s.x + n)
}

/// Ideal noiseless measurement `Y = H x`. For oracle and test use only: the
/// learners never see it.
pub fn ideal_measurement(model: &LdsModel, s: &PlantState) -> DVector<f64> {
    &model.h * &s.x
}

/// Simulate `n_feat` independent trajectories of `horizon` steps. Each
/// feature owns three noise streams (initial state, plant, measurement), so
/// ensembles are reproducible regardless of generation order. `controls[t]`
/// is applied between steps `t` and `t+1` for every feature; `None` means
/// unforced.
pub fn simulate_ensemble(
    model: &LdsModel,
    init: &InitialState,
    n_feat: usize,
    horizon: usize,
    controls: Option<&[DVector<f64>]>,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n_feat == 0 {
        return Err(Error::Parameter("n_feat must be at least 1".into()));
    }
    if horizon == 0 {
        return Err(Error::Parameter("horizon must be at least 1".into()));
    }
    if let Some(us) = controls {
        if us.len() + 1 < horizon {
            return Err(Error::Parameter(format!(
                "need at least {} controls for horizon {}",
                horizon - 1,
                horizon
            )));
        }
    }
    let zero_u = DVector::zeros(model.du());
    let control_at = |t: usize| -> DVector<f64> {
        controls
            .and_then(|us| us.get(t).cloned())
            .unwrap_or_else(|| zero_u.clone())
    };

    let mut out = Vec::with_capacity(n_feat);
    for p in 0..n_feat {
        let mut init_rng = RngStream::new(seed, stream_id(STREAM_INIT, p));
        let mut plant_rng = RngStream::new(seed, stream_id(STREAM_PLANT, p));
        let mut meas_rng = RngStream::new(seed, stream_id(STREAM_MEAS, p));

        let mut state = PlantState {
            x: init.draw(&mut init_rng)?,
            t: 0,
        };
        let mut traj = Trajectory {
            states: Vec::with_capacity(horizon),
            measurements: Vec::with_capacity(horizon),
            ideal_measurements: Vec::with_capacity(horizon),
            controls: Vec::with_capacity(horizon),
        };
        for t in 0..horizon {
            traj.measurements.push(measure(model, &state, &mut meas_rng)?);
            traj.ideal_measurements.push(ideal_measurement(model, &state));
            let u = control_at(t);
            traj.controls.push(u.clone());
            traj.states.push(state.clone());
            if t + 1 < horizon {
                state = step_plant(model, &state, &u, &mut plant_rng)?;
            }
        }
        out.push(traj);
    }
    Ok(out)
}
