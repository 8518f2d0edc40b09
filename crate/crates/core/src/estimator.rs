//! Hebbian learning and execution of the measurement-space Kalman filter,
//! together with system identification of the dynamics map `F̃`.
//!
//! Everything lives in measurement coordinates: the state is never seen.
//! Per time step `t` the network forms the prediction errors
//! `η_t = ŷ⁻_t - y_t`, whose ensemble covariance equals `Z_t`, and runs
//!
//! ```text
//! ŷ_t      = y_t + R̂ Z⁻¹ η_t
//! ŷ⁻_{t+1} = F̂ ŷ_t + ũ_t
//! ```
//!
//! `Z` is carried as a [`CovarianceRep`] (lateral-series or learned-inverse
//! form), `R̂` is learned offline from sensor noise, and `F̂` is learned by
//! regression on raw measurements first and on filtered estimates once those
//! are trustworthy. The per-feature update loop is strictly sequential:
//! feature `p` sees the matrices as already updated by feature `p-1`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::covariance::{CovarianceRep, RepMethod};
use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::rates::{AdaptiveRate, MurataParams};
use crate::rng::{stream_id, RngStream};

/// Stream tag for arbitrary weight initialization.
pub const STREAM_WEIGHT_INIT: u32 = 5;

/// Operating mode of the estimator network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMode {
    /// Learn `F̂` from raw measurement pairs.
    InitialF,
    /// Sensors disconnected from the plant: measurements are pure noise,
    /// used to learn `R̂`.
    OfflineSensor,
    /// Filtering, prediction, covariance learning, optional `F̂` refinement.
    Kalman,
}

/// How to seat the covariance representation when Kalman mode first runs.
#[derive(Debug, Clone)]
pub enum ZInit {
    /// Sample covariance of the first error batch when the batch spans the
    /// space, otherwise a scale-matched multiple of the identity.
    Auto,
    Identity,
    /// `(mean ||η||² / Dy) I + R̂`.
    ScaledIdentity,
    /// Sample covariance of the first error batch.
    SampleCovariance,
    Matrix(DMatrix<f64>),
}

/// How to initialize `F̂`.
#[derive(Debug, Clone)]
pub enum FInit {
    /// Independent entries uniform in `[-scale, scale]`.
    RandomUniform { scale: f64 },
    Matrix(DMatrix<f64>),
}

/// Optional adaptive-rate configuration.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveConfig {
    pub params: MurataParams,
    pub initial_rate: f64,
}

#[derive(Debug, Clone)]
pub struct EstimatorOptions {
    pub method: RepMethod,
    /// Per-update learning rates. Callers running the per-feature loop
    /// should pass the total rate divided by the feature count.
    pub gamma_f: f64,
    pub gamma_r: f64,
    pub gamma_z: f64,
    /// Refine `F̂` from `(η, ŷ)` pairs during Kalman mode.
    pub refine_f: bool,
    pub z_init: ZInit,
    pub f_init: FInit,
    pub adaptive_z: Option<AdaptiveConfig>,
    pub adaptive_f: Option<AdaptiveConfig>,
    /// Regime-change detector: recent window length and trigger factor.
    pub regime_window: usize,
    pub regime_factor: f64,
    /// Record the tracked gain / dynamics entries per feature update.
    pub trace: bool,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            method: RepMethod::series_default(),
            gamma_f: 0.01,
            gamma_r: 1.0,
            gamma_z: 0.01,
            refine_f: false,
            z_init: ZInit::Auto,
            f_init: FInit::RandomUniform { scale: 0.1 },
            adaptive_z: None,
            adaptive_f: None,
            regime_window: 20,
            regime_factor: 3.0,
            trace: false,
        }
    }
}

/// Per-feature trace of one Kalman step: the tracked entry of
/// `I - HK = R̂Z⁻¹` and of `F̂` after each feature update.
#[derive(Debug, Clone, Default)]
pub struct StepTrace {
    pub gain_entry: Vec<f64>,
    pub f_entry: Vec<f64>,
}

/// The estimator network state.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    dy: usize,
    n_feat: usize,
    t: usize,
    mode: EstimatorMode,
    f_hat: DMatrix<f64>,
    r_hat: DMatrix<f64>,
    z: Option<CovarianceRep>,
    yhat_prev: Vec<DVector<f64>>,
    yhat_minus: Vec<DVector<f64>>,
    eta: Vec<DVector<f64>>,
    opts: EstimatorOptions,
    adaptive_z: Option<AdaptiveRate>,
    adaptive_f: Option<AdaptiveRate>,
    residuals: VecDeque<f64>,
    trace_row: usize,
    trace_col: usize,
}

impl EstimatorState {
    /// Build an estimator in `InitialF` mode. `seed` feeds only the
    /// arbitrary weight initialization.
    pub fn new(dy: usize, n_feat: usize, opts: EstimatorOptions, seed: u64) -> Result<Self> {
        if dy == 0 {
            return Err(Error::Parameter("Dy must be positive".into()));
        }
        if n_feat == 0 {
            return Err(Error::Parameter("n_feat must be at least 1".into()));
        }
        let f_hat = match &opts.f_init {
            FInit::RandomUniform { scale } => {
                let mut rng = RngStream::new(seed, stream_id(STREAM_WEIGHT_INIT, 0));
                DMatrix::from_fn(dy, dy, |_, _| rng.uniform(-scale, *scale))
            }
            FInit::Matrix(m) => {
                if m.shape() != (dy, dy) {
                    return Err(Error::Dimension("F̂ init must be Dy x Dy".into()));
                }
                m.clone()
            }
        };
        let flow_dim = dy * dy;
        let adaptive_z = opts
            .adaptive_z
            .map(|c| AdaptiveRate::new(c.params, flow_dim, c.initial_rate));
        let adaptive_f = opts
            .adaptive_f
            .map(|c| AdaptiveRate::new(c.params, flow_dim, c.initial_rate));
        let row = dy.saturating_sub(1);
        Ok(Self {
            dy,
            n_feat,
            t: 0,
            mode: EstimatorMode::InitialF,
            f_hat,
            // Zero init is the convenient choice for recency-weighted R learning.
            r_hat: DMatrix::zeros(dy, dy),
            z: None,
            yhat_prev: Vec::new(),
            yhat_minus: Vec::new(),
            eta: Vec::new(),
            opts,
            adaptive_z,
            adaptive_f,
            residuals: VecDeque::new(),
            trace_row: row,
            trace_col: row,
        })
    }

    pub fn mode(&self) -> EstimatorMode {
        self.mode
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn n_feat(&self) -> usize {
        self.n_feat
    }

    pub fn dy(&self) -> usize {
        self.dy
    }

    pub fn f_hat(&self) -> &DMatrix<f64> {
        &self.f_hat
    }

    pub fn r_hat(&self) -> &DMatrix<f64> {
        &self.r_hat
    }

    pub fn set_f_hat(&mut self, m: DMatrix<f64>) -> Result<()> {
        if m.shape() != (self.dy, self.dy) {
            return Err(Error::Dimension("F̂ must be Dy x Dy".into()));
        }
        self.f_hat = m;
        Ok(())
    }

    pub fn set_r_hat(&mut self, m: DMatrix<f64>) -> Result<()> {
        if m.shape() != (self.dy, self.dy) {
            return Err(Error::Dimension("R̂ must be Dy x Dy".into()));
        }
        self.r_hat = m;
        Ok(())
    }

    /// Adjust the dynamics-learning rate (e.g. signal-normalized schedules).
    pub fn set_gamma_f(&mut self, gamma: f64) {
        self.opts.gamma_f = gamma;
    }

    /// Adjust the covariance-learning rate.
    pub fn set_gamma_z(&mut self, gamma: f64) {
        self.opts.gamma_z = gamma;
    }

    /// Enable or disable dynamics refinement during Kalman mode.
    pub fn set_refine_f(&mut self, on: bool) {
        self.opts.refine_f = on;
    }

    /// Current error vectors (one per feature), populated during stepping.
    pub fn eta(&self) -> &[DVector<f64>] {
        &self.eta
    }

    pub fn yhat_prev(&self) -> &[DVector<f64>] {
        &self.yhat_prev
    }

    pub fn yhat_minus(&self) -> &[DVector<f64>] {
        &self.yhat_minus
    }

    /// Configuration warnings, e.g. an inverse-form learning rate too large
    /// for the rule's validity region.
    pub fn config_warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if matches!(self.opts.method, RepMethod::Inverse) && self.opts.gamma_z > 0.05 {
            w.push(format!(
                "inverse-form covariance learning expects a small rate; gamma_z = {} \
                 exceeds 0.05",
                self.opts.gamma_z
            ));
        }
        w
    }

    fn require_mode(&self, m: EstimatorMode, what: &str) -> Result<()> {
        if self.mode != m {
            return Err(Error::Mode(format!(
                "{what} requires {m:?} mode, estimator is in {:?}",
                self.mode
            )));
        }
        Ok(())
    }

    /// Switch to offline-sensor mode (from `InitialF`).
    pub fn begin_offline_sensor(&mut self) -> Result<()> {
        self.require_mode(EstimatorMode::InitialF, "begin_offline_sensor")?;
        self.mode = EstimatorMode::OfflineSensor;
        Ok(())
    }

    /// Return to raw dynamics learning (from `OfflineSensor`).
    pub fn begin_initial_f(&mut self) -> Result<()> {
        self.require_mode(EstimatorMode::OfflineSensor, "begin_initial_f")?;
        self.mode = EstimatorMode::InitialF;
        Ok(())
    }

    /// `R̂ <- (1-γ_R)R̂ + γ_R <nn'>` from pure sensor-noise draws.
    pub fn learn_r_offline(&mut self, noise_batch: &[DVector<f64>]) -> Result<()> {
        self.require_mode(EstimatorMode::OfflineSensor, "learn_r_offline")?;
        if noise_batch.is_empty() {
            return Err(Error::Parameter("empty noise batch".into()));
        }
        let mut moment = DMatrix::zeros(self.dy, self.dy);
        for n in noise_batch {
            if n.len() != self.dy {
                return Err(Error::Dimension("noise draw length mismatch".into()));
            }
            moment += n * n.transpose();
        }
        moment /= noise_batch.len() as f64;
        let g = self.opts.gamma_r;
        self.r_hat = symmetrize(&(&self.r_hat * (1.0 - g) + moment * g));
        Ok(())
    }

    /// Raw-data dynamics learning:
    /// `ε = F̂y_{t-1} + ũ_{t-1} - y_t`, `F̂ <- F̂ - γ_F <ε y'_{t-1}>`.
    pub fn learn_f_initial(
        &mut self,
        y_prev: &[DVector<f64>],
        y_now: &[DVector<f64>],
        u_tilde_prev: &DVector<f64>,
    ) -> Result<()> {
        self.require_mode(EstimatorMode::InitialF, "learn_f_initial")?;
        if y_prev.is_empty() || y_prev.len() != y_now.len() {
            return Err(Error::Parameter("batches must be nonempty and equal length".into()));
        }
        let mut flow = DMatrix::zeros(self.dy, self.dy);
        for (yp, yn) in y_prev.iter().zip(y_now.iter()) {
            let eps = &self.f_hat * yp + u_tilde_prev - yn;
            flow += eps * yp.transpose();
        }
        flow /= y_prev.len() as f64;
        let gf = self.gamma_f_now();
        self.f_hat -= &flow * gf;
        if let Some(ar) = self.adaptive_f.as_mut() {
            ar.observe_matrix(&flow);
        }
        Ok(())
    }

    /// Enter Kalman mode, seating one feature slot per entry of `y0` with
    /// `ŷ_0 = y_0`. The covariance representation is initialized lazily when
    /// the first step runs.
    pub fn enter_kalman(&mut self, y0: &[DVector<f64>]) -> Result<()> {
        if self.mode == EstimatorMode::Kalman {
            return Err(Error::Mode("already in Kalman mode".into()));
        }
        self.seat_features(y0)?;
        self.mode = EstimatorMode::Kalman;
        Ok(())
    }

    /// Re-seat the tracked features while keeping all learned weights.
    /// Useful when the same trained network switches to tracking a new
    /// (e.g. single, controlled) feature set.
    pub fn begin_tracking(&mut self, y0: &[DVector<f64>]) -> Result<()> {
        self.require_mode(EstimatorMode::Kalman, "begin_tracking")?;
        self.seat_features(y0)
    }

    fn seat_features(&mut self, y0: &[DVector<f64>]) -> Result<()> {
        if y0.is_empty() {
            return Err(Error::Parameter("need at least one feature".into()));
        }
        for y in y0 {
            if y.len() != self.dy {
                return Err(Error::Dimension("measurement length mismatch".into()));
            }
        }
        self.n_feat = y0.len();
        self.yhat_prev = y0.to_vec();
        self.yhat_minus = vec![DVector::zeros(self.dy); self.n_feat];
        self.eta = vec![DVector::zeros(self.dy); self.n_feat];
        self.residuals.clear();
        self.t = self.t.max(1);
        Ok(())
    }

    /// Abrupt-change response: back to raw dynamics learning, discard the
    /// covariance representation (suspending its learning), keep `F̂` as a
    /// warm start and `R̂` as is.
    pub fn on_regime_change(&mut self) {
        self.mode = EstimatorMode::InitialF;
        self.z = None;
        self.residuals.clear();
        self.yhat_prev.clear();
        self.yhat_minus.clear();
        self.eta.clear();
    }

    fn gamma_f_now(&self) -> f64 {
        self.adaptive_f
            .as_ref()
            .map(|a| a.rate())
            .unwrap_or(self.opts.gamma_f)
    }

    fn gamma_z_now(&self) -> f64 {
        self.adaptive_z
            .as_ref()
            .map(|a| a.rate())
            .unwrap_or(self.opts.gamma_z)
    }

    fn z_rep(&self) -> Result<&CovarianceRep> {
        self.z
            .as_ref()
            .ok_or_else(|| Error::Mode("covariance representation not initialized".into()))
    }

    /// Manually seat the covariance representation (tests, oracle feeds).
    pub fn set_z_from_matrix(&mut self, z: &DMatrix<f64>) -> Result<()> {
        self.z = Some(CovarianceRep::from_matrix(z, self.opts.method)?);
        Ok(())
    }

    pub fn z_matrix(&self) -> Result<DMatrix<f64>> {
        self.z_rep()?.matrix()
    }

    /// `Z⁻¹v` through the learned representation.
    pub fn apply_z_inverse(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.z_rep()?.apply_inverse(v)
    }

    /// The blending matrix `I - HK = R̂Z⁻¹` (diagnostics and traces).
    pub fn gain_matrix(&self) -> Result<DMatrix<f64>> {
        Ok(&self.r_hat * self.z_rep()?.inverse_matrix()?)
    }

    fn init_z_if_needed(&mut self, y: &[DVector<f64>], u_tilde_prev: &DVector<f64>) -> Result<()> {
        if self.z.is_some() {
            return Ok(());
        }
        // First error batch with the current weights, before any update.
        let etas: Vec<DVector<f64>> = self
            .yhat_prev
            .iter()
            .zip(y.iter())
            .map(|(yh, yt)| &self.f_hat * yh + u_tilde_prev - yt)
            .collect();
        let policy = match &self.opts.z_init {
            ZInit::Auto => {
                if self.n_feat >= self.dy {
                    ZInit::SampleCovariance
                } else {
                    ZInit::ScaledIdentity
                }
            }
            other => other.clone(),
        };
        let eye = DMatrix::identity(self.dy, self.dy);
        let z0 = match policy {
            ZInit::Identity => eye,
            ZInit::ScaledIdentity => {
                let ms = etas.iter().map(|e| e.norm_squared()).sum::<f64>()
                    / (etas.len() as f64 * self.dy as f64);
                let z = &eye * ms + &self.r_hat;
                if z.trace() <= 0.0 {
                    eye
                } else {
                    z
                }
            }
            ZInit::SampleCovariance => {
                let mut m = DMatrix::zeros(self.dy, self.dy);
                for e in &etas {
                    m += e * e.transpose();
                }
                m /= etas.len() as f64;
                let min_eig = crate::linalg::min_sym_eigenvalue(&m);
                if min_eig <= 0.0 {
                    // Degenerate batch: ridge just enough to factor.
                    m += &eye * (m.trace().max(1.0) * 1e-9 - min_eig.min(0.0));
                }
                m
            }
            ZInit::Matrix(m) => {
                if m.shape() != (self.dy, self.dy) {
                    return Err(Error::Dimension("Z init must be Dy x Dy".into()));
                }
                m
            }
            ZInit::Auto => unreachable!(),
        };
        self.z = Some(CovarianceRep::from_matrix(&z0, self.opts.method)?);
        Ok(())
    }

    /// One Kalman-mode time step over all features, strictly sequential:
    /// feature `p` uses `F̂` and the covariance representation as updated by
    /// feature `p-1`. `u_tilde_prev` is the efference copy of the control
    /// issued at `t-1` (zero when unforced).
    pub fn kalman_step(
        &mut self,
        y: &[DVector<f64>],
        u_tilde_prev: &DVector<f64>,
    ) -> Result<StepTrace> {
        self.require_mode(EstimatorMode::Kalman, "kalman_step")?;
        if y.len() != self.n_feat {
            return Err(Error::Dimension(format!(
                "expected {} feature measurements, got {}",
                self.n_feat,
                y.len()
            )));
        }
        if u_tilde_prev.len() != self.dy {
            return Err(Error::Dimension("control length must match Dy".into()));
        }
        self.init_z_if_needed(y, u_tilde_prev)?;

        let mut trace = StepTrace::default();
        let mut resid = 0.0;
        for p in 0..self.n_feat {
            let yhm = &self.f_hat * &self.yhat_prev[p] + u_tilde_prev;
            let eta = &yhm - &y[p];

            if self.opts.refine_f {
                let flow = &eta * self.yhat_prev[p].transpose();
                let gf = self.gamma_f_now();
                self.f_hat -= &flow * gf;
                if let Some(ar) = self.adaptive_f.as_mut() {
                    ar.observe_matrix(&flow);
                }
            }

            let gz = self.gamma_z_now();
            let z_flow = if self.adaptive_z.is_some() {
                let z_cur = self.z_rep()?.matrix()?;
                Some(&eta * eta.transpose() - z_cur)
            } else {
                None
            };
            self.z
                .as_mut()
                .expect("initialized above")
                .learn_one(&eta, gz)?;
            if let (Some(ar), Some(flow)) = (self.adaptive_z.as_mut(), z_flow) {
                ar.observe_matrix(&flow);
            }

            let corr = self.z_rep()?.apply_inverse(&eta)?;
            let yhat = &y[p] + &self.r_hat * corr;
            // Change detection watches the prior-estimate distance ||η||:
            // the posterior distance ||ŷ - y|| self-normalizes because the
            // covariance update absorbs a spiked error before the blend.
            resid += eta.norm();

            if self.opts.trace {
                let g = self.gain_matrix()?;
                trace.gain_entry.push(g[(self.trace_row, self.trace_col)]);
                trace.f_entry.push(self.f_hat[(self.trace_row, self.trace_col)]);
            }

            self.yhat_minus[p] = yhm;
            self.eta[p] = eta;
            self.yhat_prev[p] = yhat;
        }
        self.push_residual(resid / self.n_feat as f64);
        self.t += 1;
        Ok(trace)
    }

    // ---- batch-flavoured operations (method (a) without per-feature chaining) ----

    /// Fill `ŷ⁻_t = F̂ŷ_{t-1} + ũ_{t-1}` for every feature.
    pub fn predict(&mut self, u_tilde_prev: &DVector<f64>) -> Result<()> {
        self.require_mode(EstimatorMode::Kalman, "predict")?;
        for p in 0..self.n_feat {
            self.yhat_minus[p] = &self.f_hat * &self.yhat_prev[p] + u_tilde_prev;
        }
        Ok(())
    }

    /// `η_t = ŷ⁻_t - y_t` per feature; requires [`Self::predict`] first.
    pub fn compute_eta(&mut self, y: &[DVector<f64>]) -> Result<()> {
        self.require_mode(EstimatorMode::Kalman, "compute_eta")?;
        if y.len() != self.n_feat {
            return Err(Error::Dimension("feature count mismatch".into()));
        }
        for p in 0..self.n_feat {
            self.eta[p] = &self.yhat_minus[p] - &y[p];
        }
        Ok(())
    }

    /// Refinement rule `F̂ <- F̂ - γ_F <η_t ŷ'_{t-1}>` on the stored slots.
    pub fn learn_f_refined(&mut self) -> Result<()> {
        self.require_mode(EstimatorMode::Kalman, "learn_f_refined")?;
        if !self.opts.refine_f {
            return Err(Error::Mode("F̂ refinement is disabled".into()));
        }
        let mut flow = DMatrix::zeros(self.dy, self.dy);
        for p in 0..self.n_feat {
            flow += &self.eta[p] * self.yhat_prev[p].transpose();
        }
        flow /= self.n_feat as f64;
        let gf = self.gamma_f_now();
        self.f_hat -= &flow * gf;
        if let Some(ar) = self.adaptive_f.as_mut() {
            ar.observe_matrix(&flow);
        }
        Ok(())
    }

    /// Batch covariance update from the stored errors.
    pub fn learn_z(&mut self) -> Result<()> {
        self.require_mode(EstimatorMode::Kalman, "learn_z")?;
        let etas = self.eta.clone();
        match self.z.as_mut() {
            Some(z) => z.learn_batch(&etas, self.opts.gamma_z),
            None => Err(Error::Mode("covariance representation not initialized".into())),
        }
    }

    /// Execution: `ŷ_t = y_t + R̂Z⁻¹η_t`, then the estimates become the next
    /// step's `ŷ_{t-1}`.
    pub fn execute_update(&mut self, y: &[DVector<f64>]) -> Result<()> {
        self.require_mode(EstimatorMode::Kalman, "execute_update")?;
        if y.len() != self.n_feat {
            return Err(Error::Dimension("feature count mismatch".into()));
        }
        let mut resid = 0.0;
        for p in 0..self.n_feat {
            let corr = self.z_rep()?.apply_inverse(&self.eta[p])?;
            let yhat = &y[p] + &self.r_hat * corr;
            resid += self.eta[p].norm();
            self.yhat_prev[p] = yhat;
        }
        self.push_residual(resid / self.n_feat as f64);
        self.t += 1;
        Ok(())
    }

    // ---- regime-change detection ----

    fn push_residual(&mut self, r: f64) {
        let cap = 2 * self.opts.regime_window;
        if cap == 0 {
            return;
        }
        if self.residuals.len() == cap {
            self.residuals.pop_front();
        }
        self.residuals.push_back(r);
    }

    /// True when the mean of the prior-estimate distance `||ŷ⁻ - y||` over
    /// the most recent window exceeds `regime_factor` times the mean over
    /// the trailing window. Needs a full `2 * window` history.
    pub fn detect_regime_change(&self) -> bool {
        let w = self.opts.regime_window;
        if w == 0 || self.residuals.len() < 2 * w {
            return false;
        }
        let recent: f64 = self.residuals.iter().rev().take(w).sum::<f64>() / w as f64;
        let baseline: f64 = self.residuals.iter().take(w).sum::<f64>() / w as f64;
        baseline > 0.0 && recent > self.opts.regime_factor * baseline
    }
}

/// Sampling scheme for expectation learning: features, time averaging, or both.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleKind {
    FeaturesOnly,
    TimeAverage,
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMethod {
    pub kind: SampleKind,
    pub n_feat: usize,
    pub gamma_m: f64,
}

impl SampleMethod {
    pub fn features_only(n_feat: usize) -> Self {
        Self {
            kind: SampleKind::FeaturesOnly,
            n_feat,
            gamma_m: 1.0,
        }
    }

    pub fn time_average(gamma_m: f64) -> Self {
        Self {
            kind: SampleKind::TimeAverage,
            n_feat: 1,
            gamma_m,
        }
    }

    pub fn combined(n_feat: usize, gamma_m: f64) -> Self {
        Self {
            kind: SampleKind::Combined,
            n_feat,
            gamma_m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_feat == 0 {
            return Err(Error::Parameter("n_feat must be at least 1".into()));
        }
        match self.kind {
            SampleKind::FeaturesOnly => {
                if self.gamma_m != 1.0 {
                    return Err(Error::Parameter(
                        "features-only sampling requires gamma_m = 1".into(),
                    ));
                }
            }
            SampleKind::TimeAverage => {
                if self.n_feat != 1 {
                    return Err(Error::Parameter(
                        "time-average sampling requires n_feat = 1".into(),
                    ));
                }
                if !(self.gamma_m > 0.0 && self.gamma_m < 1.0) {
                    return Err(Error::Parameter(
                        "time-average sampling requires 0 < gamma_m < 1".into(),
                    ));
                }
            }
            SampleKind::Combined => {
                if self.n_feat < 2 {
                    return Err(Error::Parameter(
                        "combined sampling requires n_feat > 1".into(),
                    ));
                }
                if !(self.gamma_m > 0.0 && self.gamma_m < 1.0) {
                    return Err(Error::Parameter(
                        "combined sampling requires 0 < gamma_m < 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Rate per feature when the batch is applied incrementally.
    pub fn per_feature_rate(&self) -> f64 {
        self.gamma_m / self.n_feat as f64
    }
}

/// `M' = (1-γ)M + γ <v z'>` over a paired batch.
pub fn learn_expectation(
    m: &DMatrix<f64>,
    v_batch: &[DVector<f64>],
    z_batch: &[DVector<f64>],
    gamma: f64,
) -> Result<DMatrix<f64>> {
    if v_batch.is_empty() || v_batch.len() != z_batch.len() {
        return Err(Error::Parameter("batches must be nonempty and equal length".into()));
    }
    let mut moment = DMatrix::zeros(m.nrows(), m.ncols());
    for (v, z) in v_batch.iter().zip(z_batch.iter()) {
        moment += v * z.transpose();
    }
    moment /= v_batch.len() as f64;
    Ok(m * (1.0 - gamma) + moment * gamma)
}

/// Incremental form: fold the pairs one at a time at rate `gamma` each.
pub fn learn_expectation_incremental(
    m: &DMatrix<f64>,
    v_batch: &[DVector<f64>],
    z_batch: &[DVector<f64>],
    gamma: f64,
) -> Result<DMatrix<f64>> {
    if v_batch.is_empty() || v_batch.len() != z_batch.len() {
        return Err(Error::Parameter("batches must be nonempty and equal length".into()));
    }
    let mut out = m.clone();
    for (v, z) in v_batch.iter().zip(z_batch.iter()) {
        out = out * (1.0 - gamma) + v * z.transpose() * gamma;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::RepMethod;
    use crate::lds::{sample_gaussian, simulate_ensemble, InitialState, LdsModel};
    use crate::oracle::{derive_transformed, z_step};

    fn benchmark_model() -> LdsModel {
        LdsModel::planar_rotations(15.0, 50.0, 1e-5, 1e-4)
    }

    fn kalman_estimator(model: &LdsModel, n_feat: usize, opts: EstimatorOptions) -> EstimatorState {
        let tm = derive_transformed(model).unwrap();
        let mut est = EstimatorState::new(2, n_feat, opts, 99).unwrap();
        est.set_f_hat(tm.f_tilde.clone()).unwrap();
        est.set_r_hat(model.r_true.clone()).unwrap();
        est
    }

    #[test]
    fn mode_transitions_are_gated() {
        let mut est = EstimatorState::new(2, 1, EstimatorOptions::default(), 1).unwrap();
        assert_eq!(est.mode(), EstimatorMode::InitialF);
        assert!(est.learn_r_offline(&[DVector::zeros(2)]).is_err());
        est.begin_offline_sensor().unwrap();
        assert!(est.begin_offline_sensor().is_err());
        est.learn_r_offline(&[DVector::zeros(2)]).unwrap();
        est.enter_kalman(&[DVector::zeros(2)]).unwrap();
        assert!(est
            .learn_f_initial(&[DVector::zeros(2)], &[DVector::zeros(2)], &DVector::zeros(2))
            .is_err());
        est.on_regime_change();
        assert_eq!(est.mode(), EstimatorMode::InitialF);
    }

    #[test]
    fn offline_r_single_draw_and_monte_carlo() {
        let mut est = EstimatorState::new(2, 1, EstimatorOptions::default(), 1).unwrap();
        est.begin_offline_sensor().unwrap();

        let n = DVector::from_vec(vec![2.0, -1.0]);
        est.learn_r_offline(&[n.clone()]).unwrap();
        assert!((est.r_hat() - &n * n.transpose()).norm() < 1e-14);

        // gamma = 1 batch over many draws recovers the true covariance.
        let cov = DMatrix::identity(2, 2) * 1e-4;
        let mut rng = RngStream::new(4, 0);
        let draws: Vec<DVector<f64>> = (0..100_000)
            .map(|_| sample_gaussian(&cov, &mut rng).unwrap())
            .collect();
        est.learn_r_offline(&draws).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((est.r_hat()[(i, j)] - cov[(i, j)]).abs() < 0.05 * 1e-4);
            }
        }

        // A noiseless sensor drives R̂ to zero.
        est.learn_r_offline(&[DVector::zeros(2), DVector::zeros(2)]).unwrap();
        assert!(est.r_hat().norm() < 1e-14);
    }

    #[test]
    fn initial_f_learning_converges_on_scalar_plant() {
        let mut opts = EstimatorOptions::default();
        opts.gamma_f = 0.3;
        opts.f_init = FInit::Matrix(DMatrix::zeros(1, 1));
        let mut est = EstimatorState::new(1, 1, opts, 1).unwrap();
        let a = 0.8;
        let mut y = DVector::from_vec(vec![1.0]);
        let mut prev_err = a;
        for _ in 0..200 {
            let y_next = &y * a;
            est.learn_f_initial(
                &[y.clone()],
                &[y_next.clone()],
                &DVector::zeros(1),
            )
            .unwrap();
            let err = (est.f_hat()[(0, 0)] - a).abs();
            assert!(err <= prev_err + 1e-12);
            prev_err = err;
            y = y_next;
            if y[0] < 0.3 {
                y = DVector::from_vec(vec![1.0]); // keep the regressor exciting
            }
        }
        assert!(prev_err < 1e-2);
    }

    #[test]
    fn exact_dynamics_and_clean_data_leave_f_unchanged() {
        let model = benchmark_model();
        let tm = derive_transformed(&model).unwrap();
        let mut opts = EstimatorOptions::default();
        opts.f_init = FInit::Matrix(tm.f_tilde.clone());
        let mut est = EstimatorState::new(2, 1, opts, 1).unwrap();
        let y0 = DVector::from_vec(vec![0.3, 0.9]);
        let y1 = &tm.f_tilde * &y0;
        est.learn_f_initial(&[y0], &[y1], &DVector::zeros(2)).unwrap();
        assert!((est.f_hat() - &tm.f_tilde).norm() < 1e-15);
    }

    #[test]
    fn one_raw_update_moves_f_toward_truth() {
        let model = benchmark_model();
        let tm = derive_transformed(&model).unwrap();
        let init = InitialState::default_for(2);
        let trajs = simulate_ensemble(&model, &init, 100, 2, None, 5).unwrap();
        let y_prev: Vec<_> = trajs.iter().map(|t| t.measurements[0].clone()).collect();
        let y_now: Vec<_> = trajs.iter().map(|t| t.measurements[1].clone()).collect();

        let mut opts = EstimatorOptions::default();
        opts.gamma_f = 0.3;
        let mut est = EstimatorState::new(2, 100, opts, 7).unwrap();
        let before = (est.f_hat() - &tm.f_tilde).norm();
        est.learn_f_initial(&y_prev, &y_now, &DVector::zeros(2)).unwrap();
        let after = (est.f_hat() - &tm.f_tilde).norm();
        assert!(after < before, "error went {before} -> {after}");
    }

    #[test]
    fn refined_update_is_a_no_op_on_zero_errors() {
        let model = benchmark_model();
        let mut opts = EstimatorOptions::default();
        opts.refine_f = true;
        let mut est = kalman_estimator(&model, 2, opts);
        est.enter_kalman(&[DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0])])
            .unwrap();
        est.set_z_from_matrix(&DMatrix::identity(2, 2)).unwrap();
        let before = est.f_hat().clone();
        // eta slots are zero right after seating.
        est.learn_f_refined().unwrap();
        assert_eq!(est.f_hat(), &before);
    }

    #[test]
    fn eta_definition_and_trivial_cases() {
        let model = benchmark_model();
        let mut est = kalman_estimator(&model, 1, EstimatorOptions::default());
        let y0 = DVector::from_vec(vec![0.5, 0.5]);
        est.enter_kalman(&[y0.clone()]).unwrap();
        est.set_z_from_matrix(&DMatrix::identity(2, 2)).unwrap();

        // Force the prediction and check both trivial eta identities.
        est.predict(&DVector::zeros(2)).unwrap();
        let expected = est.yhat_minus()[0].clone();
        est.compute_eta(&[expected.clone()]).unwrap();
        assert!(est.eta()[0].norm() < 1e-15);

        est.yhat_minus[0] = DVector::zeros(2);
        let y = DVector::from_vec(vec![0.2, -0.4]);
        est.compute_eta(&[y.clone()]).unwrap();
        assert!((est.eta()[0].clone() + y).norm() < 1e-15);
    }

    #[test]
    fn zero_measurement_trust_returns_raw_measurements() {
        let model = benchmark_model();
        let mut est = kalman_estimator(&model, 1, EstimatorOptions::default());
        est.set_r_hat(DMatrix::zeros(2, 2)).unwrap();
        let y0 = DVector::from_vec(vec![1.0, 0.0]);
        est.enter_kalman(&[y0]).unwrap();
        let y1 = DVector::from_vec(vec![0.3, 0.8]);
        est.kalman_step(&[y1.clone()], &DVector::zeros(2)).unwrap();
        assert!((&est.yhat_prev()[0] - &y1).norm() < 1e-15);
    }

    #[test]
    fn z_equal_r_trusts_the_prediction() {
        let model = benchmark_model();
        let mut opts = EstimatorOptions::default();
        opts.gamma_z = 0.0; // freeze Z at R
        let mut est = kalman_estimator(&model, 1, opts);
        let y0 = DVector::from_vec(vec![1.0, 0.0]);
        est.enter_kalman(&[y0]).unwrap();
        est.set_z_from_matrix(&model.r_true.clone()).unwrap();
        let y1 = DVector::from_vec(vec![0.4, -0.6]);
        est.kalman_step(&[y1], &DVector::zeros(2)).unwrap();
        // ŷ = ŷ⁻ when RZ⁻¹ = I, up to the series-application tolerance.
        let expected = est.yhat_minus()[0].clone();
        assert!((&est.yhat_prev()[0] - expected).norm() < 1e-6);
    }

    #[test]
    fn eta_ensemble_tracks_oracle_covariance_path() {
        // Oracle weights, oracle Z path applied; the sample covariance of
        // eta must follow the recursion (10^4 features keeps this quick).
        let model = benchmark_model();
        let tm = derive_transformed(&model).unwrap();
        let init = InitialState::default_for(2);
        let n_feat = 10_000;
        let steps = 6;
        let trajs = simulate_ensemble(&model, &init, n_feat, steps + 1, None, 11).unwrap();

        // eta_0 from ŷ⁻_0 = 0: covariance H E(x0 x0') H' + R.
        let ex0 = &init.cov + &init.mean * init.mean.transpose();
        let mut z_oracle =
            &model.h * ex0 * model.h.transpose() + &model.r_true;
        let mut etas: Vec<DVector<f64>> = trajs
            .iter()
            .map(|tr| -tr.measurements[0].clone())
            .collect();

        for t in 0..steps {
            let sample = {
                let mut m = DMatrix::zeros(2, 2);
                for e in &etas {
                    m += e * e.transpose();
                }
                m / n_feat as f64
            };
            let gap = crate::linalg::rel_frobenius_gap(&sample, &z_oracle);
            assert!(gap < 0.05, "step {t}: relative gap {gap}");

            let rz = crate::oracle::gain_from_z(&tm.r, &z_oracle).unwrap();
            for (p, e) in etas.iter_mut().enumerate() {
                let y_t = &trajs[p].measurements[t];
                let y_next = &trajs[p].measurements[t + 1];
                *e = &tm.f_tilde * (y_t + &rz * &*e) - y_next;
            }
            z_oracle = z_step(&tm, &z_oracle).unwrap();
        }
    }

    #[test]
    fn kalman_step_is_deterministic() {
        let model = benchmark_model();
        let init = InitialState::default_for(2);
        let trajs = simulate_ensemble(&model, &init, 20, 5, None, 3).unwrap();
        let run = || {
            let mut opts = EstimatorOptions::default();
            opts.gamma_z = 0.05;
            opts.trace = true;
            let mut est = kalman_estimator(&model, 20, opts);
            let y0: Vec<_> = trajs.iter().map(|t| t.measurements[0].clone()).collect();
            est.enter_kalman(&y0).unwrap();
            let mut out = Vec::new();
            for t in 1..5 {
                let y: Vec<_> = trajs.iter().map(|tr| tr.measurements[t].clone()).collect();
                let tr = est.kalman_step(&y, &DVector::zeros(2)).unwrap();
                out.extend(tr.gain_entry);
            }
            out
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn regime_change_detector_fires_on_plant_swap() {
        let model = benchmark_model();
        let swapped = LdsModel::planar_rotations(105.0, 50.0, 1e-5, 1e-4);
        let init = InitialState::default_for(2);
        let mut opts = EstimatorOptions::default();
        opts.gamma_z = 0.01;
        opts.method = RepMethod::Series { passes: 100_000, tol: 1e-8 };
        let mut est = kalman_estimator(&model, 1, opts);

        let pre = simulate_ensemble(&model, &init, 1, 200, None, 21).unwrap();
        let y0 = vec![pre[0].measurements[0].clone()];
        est.enter_kalman(&y0).unwrap();
        for t in 1..200 {
            est.kalman_step(&[pre[0].measurements[t].clone()], &DVector::zeros(2))
                .unwrap();
            assert!(!est.detect_regime_change(), "false positive at step {t}");
        }

        // Swap the plant mid-flight: keep stepping with the old weights.
        let post_init = InitialState {
            mean: pre[0].states[199].x.clone(),
            cov: DMatrix::zeros(2, 2),
        };
        let post = simulate_ensemble(&swapped, &post_init, 1, 40, None, 22).unwrap();
        let mut fired_at = None;
        for t in 1..40 {
            est.kalman_step(&[post[0].measurements[t].clone()], &DVector::zeros(2))
                .unwrap();
            if est.detect_regime_change() {
                fired_at = Some(t);
                break;
            }
        }
        let t = fired_at.expect("regime change not detected");
        assert!(t <= 20, "detected only after {t} steps");
    }

    #[test]
    fn identical_residual_window_stays_quiet() {
        let model = benchmark_model();
        let mut est = kalman_estimator(&model, 1, EstimatorOptions::default());
        est.enter_kalman(&[DVector::zeros(2)]).unwrap();
        for _ in 0..100 {
            est.push_residual(0.25);
        }
        assert!(!est.detect_regime_change());
    }

    #[test]
    fn expectation_learning_rules() {
        let m0 = DMatrix::zeros(2, 2);
        let v = DVector::from_vec(vec![1.0, 2.0]);
        let z = DVector::from_vec(vec![-1.0, 0.5]);

        // Full replacement.
        let m = learn_expectation(&m0, &[v.clone()], &[z.clone()], 1.0).unwrap();
        assert!((m - &v * z.transpose()).norm() < 1e-15);

        // Frozen.
        let m1 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let m = learn_expectation(&m1, &[v.clone()], &[z.clone()], 0.0).unwrap();
        assert_eq!(m, m1);

        // Monte Carlo: <vv'> estimates the covariance.
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let mut rng = RngStream::new(8, 0);
        let draws: Vec<DVector<f64>> = (0..100_000)
            .map(|_| sample_gaussian(&cov, &mut rng).unwrap())
            .collect();
        let m = learn_expectation(&m0, &draws, &draws, 1.0).unwrap();
        assert!(crate::linalg::rel_frobenius_gap(&m, &cov) < 0.05);
    }

    #[test]
    fn sample_method_constraints() {
        assert!(SampleMethod::features_only(100).validate().is_ok());
        assert!(SampleMethod::time_average(0.01).validate().is_ok());
        assert!(SampleMethod::combined(10, 0.3).validate().is_ok());

        assert!(SampleMethod { kind: SampleKind::FeaturesOnly, n_feat: 5, gamma_m: 0.5 }
            .validate()
            .is_err());
        assert!(SampleMethod { kind: SampleKind::TimeAverage, n_feat: 2, gamma_m: 0.1 }
            .validate()
            .is_err());
        assert!(SampleMethod { kind: SampleKind::Combined, n_feat: 1, gamma_m: 0.1 }
            .validate()
            .is_err());
        assert!((SampleMethod::features_only(4).per_feature_rate() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn inverse_method_rate_warning() {
        let mut opts = EstimatorOptions::default();
        opts.method = RepMethod::Inverse;
        opts.gamma_z = 0.2;
        let est = EstimatorState::new(2, 1, opts, 1).unwrap();
        assert_eq!(est.config_warnings().len(), 1);
    }

    #[test]
    fn gradient_of_raw_prediction_error() {
        // The update direction <eps y'> must match central differences of
        // (1/2) mean ||F y_prev + u - y_now||^2 entry by entry.
        let dy = 3;
        let mut rng = RngStream::new(31, 0);
        let f0 = DMatrix::from_fn(dy, dy, |_, _| rng.standard_normal());
        let u = rng.normal_vector(dy);
        let y_prev: Vec<DVector<f64>> = (0..40).map(|_| rng.normal_vector(dy)).collect();
        let y_now: Vec<DVector<f64>> = (0..40).map(|_| rng.normal_vector(dy)).collect();

        let loss = |f: &DMatrix<f64>| -> f64 {
            let mut s = 0.0;
            for (yp, yn) in y_prev.iter().zip(y_now.iter()) {
                s += (f * yp + &u - yn).norm_squared();
            }
            0.5 * s / y_prev.len() as f64
        };

        let mut update = DMatrix::zeros(dy, dy);
        for (yp, yn) in y_prev.iter().zip(y_now.iter()) {
            let eps = &f0 * yp + &u - yn;
            update += eps * yp.transpose();
        }
        update /= y_prev.len() as f64;

        let h = 1e-6;
        for i in 0..dy {
            for j in 0..dy {
                let mut fp = f0.clone();
                fp[(i, j)] += h;
                let mut fm = f0.clone();
                fm[(i, j)] -= h;
                let fd = (loss(&fp) - loss(&fm)) / (2.0 * h);
                let rel = (update[(i, j)] - fd).abs() / fd.abs().max(1e-12);
                assert!(rel < 1e-6, "entry ({i},{j}): {} vs {fd}", update[(i, j)]);
            }
        }
    }
}
