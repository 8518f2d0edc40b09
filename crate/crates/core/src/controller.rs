//! Hebbian learning and execution of the measurement-space Kalman
//! controller.
//!
//! The control matrices are learned backward in time from internally
//! generated noise with covariances `g̃` and `r̃`, the network's only access
//! to the cost function. Starting from `w_N = ν^r - ν^g`, each backward step
//! evolves every ensemble member by
//!
//! ```text
//! w_{τ-1} = -ν^g_{τ-1} + ν^r_τ + F̃'(ν^g_τ + ĝ T⁻¹ w_τ)
//! ```
//!
//! where `ν^g_τ` is the *same* draw that already entered `w_τ` and the two
//! fresh draws are generated only after `w_τ` has been used. The ensemble
//! second moment then tracks the exact recursion for `T_τ`, and the control
//! is `ũ_t = (-I + T⁻¹ĝ)F̃ŷ_t` using the representation learned for
//! `τ = t + 1`.
//!
//! `F̃'` is never stored here: callers pass the estimator's learned dynamics
//! matrix and the controller transposes it on use, so the two directions of
//! the coupling are views of one learned object.

use nalgebra::{DMatrix, DVector};

use crate::covariance::{CovarianceRep, RepMethod};
use crate::error::{Error, Result};
use crate::lds::GaussianSampler;
use crate::rng::{stream_id, RngStream};

/// Stream tags for the internally generated noise.
pub const STREAM_NOISE_G: u32 = 3;
pub const STREAM_NOISE_R: u32 = 4;

/// Handling of the backward-computed control representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoragePolicy {
    /// Store a snapshot for every execution step (the software default).
    StoreAll,
    /// Store nothing; rerun the backward sweep for each execution step.
    RelearnEachStep,
    /// Store every k-th snapshot and reuse the nearest later one.
    ReuseSteps(usize),
}

#[derive(Debug, Clone)]
pub struct ControllerOptions {
    /// Ensemble size (the number of independent `w` members).
    pub n_w: usize,
    pub method: RepMethod,
    /// Learning rate for the representation. Batch semantics for the series
    /// form (1.0 replaces the moment each backward step); per-member rate
    /// for the inverse form.
    pub gamma_t: f64,
    pub storage: StoragePolicy,
}

impl ControllerOptions {
    pub fn new(n_w: usize) -> Self {
        Self {
            n_w,
            method: RepMethod::series_default(),
            gamma_t: 1.0,
            storage: StoragePolicy::StoreAll,
        }
    }

    /// Inverse-form variant; the per-member rate keeps each update small
    /// while the whole ensemble still moves the representation by roughly
    /// `total` per backward step.
    pub fn with_inverse_method(n_w: usize, total: f64) -> Self {
        Self {
            n_w,
            method: RepMethod::Inverse,
            gamma_t: total / n_w as f64,
            storage: StoragePolicy::StoreAll,
        }
    }
}

#[derive(Debug, Clone)]
struct WMember {
    w: DVector<f64>,
    /// The `ν^g` draw that entered this member's current `w`.
    nu_g: DVector<f64>,
}

/// Report from offline `ĝ` learning.
#[derive(Debug, Clone)]
pub struct GHatReport {
    pub rank: usize,
    pub dim: usize,
}

impl GHatReport {
    /// A sample second moment from fewer draws than dimensions cannot be
    /// positive definite.
    pub fn sufficient(&self) -> bool {
        self.rank == self.dim
    }
}

/// The controller network state.
#[derive(Debug, Clone)]
pub struct Controller {
    dy: usize,
    g_hat: DMatrix<f64>,
    rep: Option<CovarianceRep>,
    members: Vec<WMember>,
    tau: usize,
    horizon_n: usize,
    opts: ControllerOptions,
    g_noise: GaussianSampler,
    r_noise: GaussianSampler,
    g_stream: RngStream,
    r_stream: RngStream,
}

/// Snapshots of the control representation, indexed by execution time.
#[derive(Debug, Clone)]
pub struct ControlSchedule {
    snapshots: Vec<(usize, CovarianceRep)>,
    pub policy: StoragePolicy,
    pub t0: usize,
    pub n: usize,
}

impl ControlSchedule {
    /// Representation to use at execution time `t`: the stored entry for the
    /// smallest stored time at or above `t`.
    pub fn rep_for(&self, t: usize) -> Result<&CovarianceRep> {
        if t < self.t0 || t >= self.n {
            return Err(Error::Schedule(t));
        }
        self.snapshots
            .iter()
            .filter(|(st, _)| *st >= t)
            .min_by_key(|(st, _)| *st)
            .map(|(_, rep)| rep)
            .ok_or(Error::Schedule(t))
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }
}

impl Controller {
    /// `true_g_tilde` and `true_r_tilde` parameterize the internal noise
    /// generators; this is how the cost function is specified to the
    /// network. `ĝ` (the matrix used in computations) starts at zero and is
    /// learned from the generator's own draws, or injected via
    /// [`Self::set_g_hat`].
    pub fn new(
        true_g_tilde: &DMatrix<f64>,
        true_r_tilde: &DMatrix<f64>,
        opts: ControllerOptions,
        seed: u64,
    ) -> Result<Self> {
        let dy = true_g_tilde.nrows();
        if true_g_tilde.shape() != (dy, dy) || true_r_tilde.shape() != (dy, dy) {
            return Err(Error::Dimension("cost transforms must be Dy x Dy".into()));
        }
        if opts.n_w == 0 {
            return Err(Error::Parameter("n_w must be at least 1".into()));
        }
        Ok(Self {
            dy,
            g_hat: DMatrix::zeros(dy, dy),
            rep: None,
            members: Vec::new(),
            tau: 0,
            horizon_n: 0,
            opts,
            g_noise: GaussianSampler::new(true_g_tilde)?,
            r_noise: GaussianSampler::new(true_r_tilde)?,
            g_stream: RngStream::new(seed, stream_id(STREAM_NOISE_G, 0)),
            r_stream: RngStream::new(seed, stream_id(STREAM_NOISE_R, 0)),
        })
    }

    pub fn dy(&self) -> usize {
        self.dy
    }

    pub fn g_hat(&self) -> &DMatrix<f64> {
        &self.g_hat
    }

    pub fn set_g_hat(&mut self, m: DMatrix<f64>) -> Result<()> {
        if m.shape() != (self.dy, self.dy) {
            return Err(Error::Dimension("ĝ must be Dy x Dy".into()));
        }
        self.g_hat = m;
        Ok(())
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    /// Draw counts of the two noise streams (for independence accounting).
    pub fn noise_draws(&self) -> (u64, u64) {
        (self.g_stream.draw_count(), self.r_stream.draw_count())
    }

    /// Current ensemble members' `w` vectors.
    pub fn w_ensemble(&self) -> Vec<DVector<f64>> {
        self.members.iter().map(|m| m.w.clone()).collect()
    }

    /// Learned (or injected) representation as a matrix, for diagnostics.
    pub fn t_matrix(&self) -> Result<DMatrix<f64>> {
        self.rep
            .as_ref()
            .ok_or_else(|| Error::Mode("control representation not initialized".into()))?
            .matrix()
    }

    /// Inject a representation (oracle feeds in tests and checks).
    pub fn set_t_rep_from_matrix(&mut self, t: &DMatrix<f64>) -> Result<()> {
        self.rep = Some(CovarianceRep::from_matrix(t, self.opts.method)?);
        Ok(())
    }

    /// `(ν^g, w)` pairs of the current ensemble, for independence accounting.
    pub fn member_pairs(&self) -> impl Iterator<Item = (&DVector<f64>, &DVector<f64>)> {
        self.members.iter().map(|m| (&m.nu_g, &m.w))
    }

    /// `ĝ <- mean(ν^g ν^g')` over fresh generator draws (the analogue of
    /// offline sensor-noise learning).
    pub fn learn_g_offline(&mut self, n_samples: usize) -> Result<GHatReport> {
        if n_samples == 0 {
            return Err(Error::Parameter("need at least one sample".into()));
        }
        let mut moment = DMatrix::zeros(self.dy, self.dy);
        for _ in 0..n_samples {
            let nu = self.g_noise.draw(&mut self.g_stream);
            moment += &nu * nu.transpose();
        }
        moment /= n_samples as f64;
        self.g_hat = moment;
        let tol = 1e-10 * self.g_hat.trace().max(1e-300);
        let rank = crate::linalg::sym_eigenvalues(&self.g_hat)
            .iter()
            .filter(|&&e| e > tol)
            .count();
        Ok(GHatReport { rank, dim: self.dy })
    }

    /// Seat the ensemble at the horizon: `w_N = ν^r - ν^g`, `τ = N`. The
    /// representation starts from the ensemble's own second moment.
    pub fn init_w_ensemble(&mut self, n: usize, t0: usize) -> Result<()> {
        if n <= t0 {
            return Err(Error::Parameter("horizon N must exceed t0".into()));
        }
        self.members = (0..self.opts.n_w)
            .map(|_| {
                let nu_g = self.g_noise.draw(&mut self.g_stream);
                let nu_r = self.r_noise.draw(&mut self.r_stream);
                WMember {
                    w: nu_r - &nu_g,
                    nu_g,
                }
            })
            .collect();
        self.tau = n;
        self.horizon_n = n;
        let mut moment = DMatrix::zeros(self.dy, self.dy);
        for m in &self.members {
            moment += &m.w * m.w.transpose();
        }
        moment /= self.members.len() as f64;
        let min_eig = crate::linalg::min_sym_eigenvalue(&moment);
        if min_eig <= 0.0 {
            moment += DMatrix::identity(self.dy, self.dy)
                * (moment.trace().max(1.0) * 1e-9 - min_eig.min(0.0));
        }
        self.rep = Some(CovarianceRep::from_matrix(&moment, self.opts.method)?);
        Ok(())
    }

    /// One backward step of every member plus the Hebbian representation
    /// update; decrements `τ`. Fresh noise is drawn only after each member's
    /// `w_τ` has been consumed.
    pub fn step_backward(&mut self, f_tilde: &DMatrix<f64>) -> Result<()> {
        if f_tilde.shape() != (self.dy, self.dy) {
            return Err(Error::Dimension("F̃ must be Dy x Dy".into()));
        }
        self.step_backward_impl(f_tilde)
    }

    /// Snapshots the current representation (policy-dependent) and runs the
    /// full backward sweep `τ = N, N-1, ..., t0+1`.
    pub fn sweep(&mut self, f_tilde: &DMatrix<f64>, n: usize, t0: usize) -> Result<ControlSchedule> {
        self.init_w_ensemble(n, t0)?;
        let mut snapshots = Vec::new();
        while self.tau > t0 {
            let exec_t = self.tau - 1;
            if self.should_store(exec_t, n) {
                let rep = self.rep.as_ref().expect("initialized").clone();
                snapshots.push((exec_t, rep));
            }
            self.step_backward_impl(f_tilde)?;
        }
        Ok(ControlSchedule {
            snapshots,
            policy: self.opts.storage,
            t0,
            n,
        })
    }

    fn should_store(&self, exec_t: usize, n: usize) -> bool {
        match self.opts.storage {
            StoragePolicy::StoreAll => true,
            StoragePolicy::RelearnEachStep => false,
            StoragePolicy::ReuseSteps(k) => {
                let k = k.max(1);
                (n - 1 - exec_t) % k == 0
            }
        }
    }

    fn step_backward_impl(&mut self, f_tilde: &DMatrix<f64>) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::Mode("w ensemble not initialized".into()));
        }
        if self.tau == 0 {
            return Err(Error::Mode("backward sweep already at τ = 0".into()));
        }
        let ft = f_tilde.transpose();
        let n_members = self.members.len();
        for i in 0..n_members {
            let tinv_w = {
                let rep = self
                    .rep
                    .as_ref()
                    .ok_or_else(|| Error::Mode("control representation not initialized".into()))?;
                rep.apply_inverse(&self.members[i].w)?
            };
            let feed = &self.members[i].nu_g + &self.g_hat * &tinv_w;
            // Fresh draws happen only now, after w_τ has been consumed.
            let nu_r = self.r_noise.draw(&mut self.r_stream);
            let nu_g_new = self.g_noise.draw(&mut self.g_stream);
            let w_new = &ft * feed + nu_r - &nu_g_new;
            self.members[i].w = w_new;
            self.members[i].nu_g = nu_g_new;
        }
        // Hebbian update toward the new ensemble's second moment.
        let ws: Vec<DVector<f64>> = self.members.iter().map(|m| m.w.clone()).collect();
        let rep = self.rep.as_mut().expect("checked above");
        match self.opts.method {
            RepMethod::Series { .. } => rep.learn_batch(&ws, self.opts.gamma_t)?,
            RepMethod::Inverse => rep.learn_incremental(&ws, self.opts.gamma_t)?,
        }
        self.tau -= 1;
        Ok(())
    }

    /// `ũ_t = (-I + T⁻¹ĝ)F̃ŷ_t` using the stored (or relearned) rep for `t`.
    /// Under the relearn policy the backward sweep is rerun down to `τ = t+1`
    /// with fresh internal noise.
    pub fn control_at(
        &mut self,
        schedule: &ControlSchedule,
        t: usize,
        yhat: &DVector<f64>,
        f_tilde: &DMatrix<f64>,
    ) -> Result<DVector<f64>> {
        if t < schedule.t0 || t >= schedule.n {
            return Err(Error::Schedule(t));
        }
        match schedule.policy {
            StoragePolicy::RelearnEachStep => {
                self.init_w_ensemble(schedule.n, schedule.t0)?;
                while self.tau > t + 1 {
                    self.step_backward_impl(f_tilde)?;
                }
                let rep = self.rep.as_ref().expect("initialized").clone();
                control_from_rep(&rep, &self.g_hat, f_tilde, yhat)
            }
            _ => {
                let rep = schedule.rep_for(t)?;
                control_from_rep(rep, &self.g_hat, f_tilde, yhat)
            }
        }
    }
}

/// `ũ = (T⁻¹ĝ - I) F̃ ŷ`: multiply by the dynamics, by `ĝ`, apply the
/// learned inverse, subtract the direct path.
pub fn control_from_rep(
    rep: &CovarianceRep,
    g_hat: &DMatrix<f64>,
    f_tilde: &DMatrix<f64>,
    yhat: &DVector<f64>,
) -> Result<DVector<f64>> {
    let fy = f_tilde * yhat;
    let gfy = g_hat * &fy;
    let tinv_gfy = rep.apply_inverse(&gfy)?;
    Ok(tinv_gfy - fy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lds::LdsModel;
    use crate::linalg::rel_frobenius_gap;
    use crate::oracle::{derive_transformed, t_step};

    fn benchmark_tm() -> crate::oracle::TransformedModel {
        derive_transformed(&LdsModel::planar_rotations(15.0, 50.0, 1e-5, 1e-4)).unwrap()
    }

    fn sample_cov(vs: &[DVector<f64>]) -> DMatrix<f64> {
        let d = vs[0].len();
        let mut m = DMatrix::zeros(d, d);
        for v in vs {
            m += v * v.transpose();
        }
        m / vs.len() as f64
    }

    #[test]
    fn zero_cost_transforms_give_zero_w() {
        let z = DMatrix::zeros(2, 2);
        let mut ctrl = Controller::new(&z, &z, ControllerOptions::new(50), 1).unwrap();
        // Representation init needs a nonzero moment; seed ĝ path manually.
        let err = ctrl.init_w_ensemble(5, 0);
        match err {
            Ok(()) => {
                for w in ctrl.w_ensemble() {
                    assert_eq!(w, DVector::zeros(2));
                }
            }
            // A fully degenerate moment cannot be represented; that is
            // acceptable; the w draws themselves must still be zero.
            Err(_) => {}
        }
    }

    #[test]
    fn w_init_covariance_is_g_plus_r() {
        let tm = benchmark_tm();
        let g = &tm.g_tilde;
        let r = &tm.r_tilde;
        let mut ctrl = Controller::new(g, r, ControllerOptions::new(100_000), 3).unwrap();
        ctrl.init_w_ensemble(5, 0).unwrap();
        let cov = sample_cov(&ctrl.w_ensemble());
        let expected = g + r;
        assert!(rel_frobenius_gap(&cov, &expected) < 0.05);
    }

    #[test]
    fn w_init_is_reproducible() {
        let tm = benchmark_tm();
        let mk = || {
            let mut c =
                Controller::new(&tm.g_tilde, &tm.r_tilde, ControllerOptions::new(64), 9).unwrap();
            c.init_w_ensemble(3, 0).unwrap();
            c.w_ensemble()
        };
        assert_eq!(mk(), mk());
    }

    #[test]
    fn one_backward_step_matches_oracle_recursion() {
        let tm = benchmark_tm();
        let mut ctrl =
            Controller::new(&tm.g_tilde, &tm.r_tilde, ControllerOptions::new(100_000), 5).unwrap();
        ctrl.set_g_hat(tm.g_tilde.clone()).unwrap();
        ctrl.init_w_ensemble(5, 0).unwrap();
        let t_n = &tm.g_tilde + &tm.r_tilde;
        // Feed the oracle T_N exactly.
        ctrl.rep = Some(
            CovarianceRep::from_matrix(&t_n, RepMethod::series_default()).unwrap(),
        );
        ctrl.step_backward_impl(&tm.f_tilde).unwrap();
        let cov = sample_cov(&ctrl.w_ensemble());
        let expected = t_step(&tm, &t_n).unwrap();
        assert!(
            rel_frobenius_gap(&cov, &expected) < 0.03,
            "gap {}",
            rel_frobenius_gap(&cov, &expected)
        );
    }

    #[test]
    fn degenerate_dynamics_cases() {
        let tm = benchmark_tm();
        // F̃ = 0 leaves w = -ν^g + ν^r with covariance g̃ + r̃.
        let mut ctrl =
            Controller::new(&tm.g_tilde, &tm.r_tilde, ControllerOptions::new(50_000), 7).unwrap();
        ctrl.set_g_hat(tm.g_tilde.clone()).unwrap();
        ctrl.init_w_ensemble(4, 0).unwrap();
        ctrl.step_backward_impl(&DMatrix::zeros(2, 2)).unwrap();
        let cov = sample_cov(&ctrl.w_ensemble());
        let expected = &tm.g_tilde + &tm.r_tilde;
        assert!(rel_frobenius_gap(&cov, &expected) < 0.03);

        // g̃ = 0: only the ν^r term remains.
        let zero = DMatrix::zeros(2, 2);
        let mut ctrl = Controller::new(&zero, &tm.r_tilde, ControllerOptions::new(50_000), 7).unwrap();
        ctrl.init_w_ensemble(4, 0).unwrap();
        ctrl.step_backward_impl(&tm.f_tilde).unwrap();
        let cov = sample_cov(&ctrl.w_ensemble());
        assert!(rel_frobenius_gap(&cov, &tm.r_tilde) < 0.03);
    }

    #[test]
    fn noise_independence_bookkeeping() {
        let tm = benchmark_tm();
        let n_w = 100_000;
        let mut ctrl =
            Controller::new(&tm.g_tilde, &tm.r_tilde, ControllerOptions::new(n_w), 13).unwrap();
        ctrl.set_g_hat(tm.g_tilde.clone()).unwrap();
        ctrl.init_w_ensemble(6, 0).unwrap();
        let dy = 2;
        let per_draw = dy as u64;
        let (g0, r0) = ctrl.noise_draws();
        assert_eq!(g0, n_w as u64 * per_draw);
        assert_eq!(r0, n_w as u64 * per_draw);

        // E(ν^g_τ w'_τ) = -g̃: the stored draw is the one inside w.
        let mut corr = DMatrix::zeros(2, 2);
        for m in &ctrl.members {
            corr += &m.nu_g * m.w.transpose();
        }
        corr /= n_w as f64;
        assert!(rel_frobenius_gap(&corr, &(-&tm.g_tilde)) < 0.05);

        ctrl.step_backward_impl(&tm.f_tilde).unwrap();
        let (g1, r1) = ctrl.noise_draws();
        assert_eq!(g1 - g0, n_w as u64 * per_draw);
        assert_eq!(r1 - r0, n_w as u64 * per_draw);

        // The invariant survives the step: fresh ν^g is inside the new w.
        let mut corr = DMatrix::zeros(2, 2);
        for m in &ctrl.members {
            corr += &m.nu_g * m.w.transpose();
        }
        corr /= n_w as f64;
        assert!(rel_frobenius_gap(&corr, &(-&tm.g_tilde)) < 0.05);
    }

    #[test]
    fn learned_t_path_follows_oracle() {
        let tm = benchmark_tm();
        for (method, label) in [
            (RepMethod::series_default(), "series"),
            (RepMethod::Inverse, "inverse"),
        ] {
            let opts = match method {
                RepMethod::Series { .. } => {
                    let mut o = ControllerOptions::new(100_000);
                    o.method = method;
                    o
                }
                RepMethod::Inverse => ControllerOptions::with_inverse_method(100_000, 6.0),
            };
            let mut ctrl = Controller::new(&tm.g_tilde, &tm.r_tilde, opts, 17).unwrap();
            ctrl.set_g_hat(tm.g_tilde.clone()).unwrap();
            ctrl.init_w_ensemble(10, 0).unwrap();
            let mut t_oracle = &tm.g_tilde + &tm.r_tilde;
            for step in 0..10 {
                ctrl.step_backward_impl(&tm.f_tilde).unwrap();
                t_oracle = t_step(&tm, &t_oracle).unwrap();
                let t_learned = ctrl.t_matrix().unwrap();
                let gap = rel_frobenius_gap(&t_learned, &t_oracle);
                assert!(gap < 0.05, "{label} step {step}: gap {gap}");
            }
        }
    }

    #[test]
    fn t_rule_fixed_points_and_freeze() {
        let t = DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.0]);
        let l = crate::linalg::psd_factor(&t).unwrap();
        let batch: Vec<DVector<f64>> = (0..2)
            .map(|j| DVector::from_column_slice((l.column(j) * 2.0_f64.sqrt()).as_slice()))
            .collect();

        let mut rep = CovarianceRep::from_matrix(&t, RepMethod::series_default()).unwrap();
        rep.learn_batch(&batch, 0.8).unwrap();
        assert!((rep.matrix().unwrap() - &t).norm() < 1e-12);

        let mut rep = CovarianceRep::from_matrix(&t, RepMethod::Inverse).unwrap();
        let before = rep.inverse_matrix().unwrap();
        rep.learn_batch(&batch, 0.03).unwrap();
        assert!((rep.inverse_matrix().unwrap() - before).norm() < 1e-12);

        let mut rep = CovarianceRep::from_matrix(&t, RepMethod::series_default()).unwrap();
        rep.learn_batch(&[DVector::from_vec(vec![9.0, 9.0])], 0.0).unwrap();
        assert!((rep.matrix().unwrap() - &t).norm() < 1e-12);
    }

    #[test]
    fn g_offline_learning() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let r = DMatrix::identity(2, 2);
        let mut ctrl = Controller::new(&g, &r, ControllerOptions::new(10), 23).unwrap();

        let report = ctrl.learn_g_offline(100_000).unwrap();
        assert!(report.sufficient());
        for i in 0..2 {
            for j in 0..2 {
                assert!((ctrl.g_hat()[(i, j)] - g[(i, j)]).abs() < 0.05 * 2.0);
            }
        }

        // A single sample is rank one and flagged.
        let report = ctrl.learn_g_offline(1).unwrap();
        assert_eq!(report.rank, 1);
        assert!(!report.sufficient());

        // Zero cost: ĝ stays zero.
        let z = DMatrix::zeros(2, 2);
        let mut ctrl = Controller::new(&z, &r, ControllerOptions::new(10), 23).unwrap();
        ctrl.learn_g_offline(100).unwrap();
        assert!(ctrl.g_hat().norm() == 0.0);
    }

    #[test]
    fn one_step_horizon_schedule_holds_initial_entry() {
        let tm = benchmark_tm();
        let mut ctrl =
            Controller::new(&tm.g_tilde, &tm.r_tilde, ControllerOptions::new(20_000), 29).unwrap();
        ctrl.set_g_hat(tm.g_tilde.clone()).unwrap();
        let sched = ctrl.sweep(&tm.f_tilde, 1, 0).unwrap();
        assert_eq!(sched.len(), 1);
        let rep = sched.rep_for(0).unwrap();
        let expected = &tm.g_tilde + &tm.r_tilde; // T_N for S_N = r
        assert!(rel_frobenius_gap(&rep.matrix().unwrap(), &expected) < 0.05);
    }

    #[test]
    fn storage_policies_agree_at_first_step() {
        let tm = benchmark_tm();
        let yhat = DVector::from_vec(vec![0.7, -0.2]);
        let run = |storage: StoragePolicy| {
            let mut opts = ControllerOptions::new(5_000);
            opts.storage = storage;
            let mut ctrl = Controller::new(&tm.g_tilde, &tm.r_tilde, opts, 31).unwrap();
            ctrl.set_g_hat(tm.g_tilde.clone()).unwrap();
            let sched = ctrl.sweep(&tm.f_tilde, 5, 0).unwrap();
            // The relearn policy consumes noise during its own sweep, so the
            // per-policy controllers must start from identical stream state:
            // rebuild for execution.
            let mut exec =
                Controller::new(&tm.g_tilde, &tm.r_tilde, {
                    let mut o = ControllerOptions::new(5_000);
                    o.storage = storage;
                    o
                }, 31)
                .unwrap();
            exec.set_g_hat(tm.g_tilde.clone()).unwrap();
            exec.control_at(&sched, 0, &yhat, &tm.f_tilde).unwrap()
        };
        let u_store = run(StoragePolicy::StoreAll);
        let u_relearn = run(StoragePolicy::RelearnEachStep);
        assert_eq!(u_store, u_relearn);
    }

    #[test]
    fn reuse_policy_stores_sparse_snapshots() {
        let tm = benchmark_tm();
        let mut opts = ControllerOptions::new(2_000);
        opts.storage = StoragePolicy::ReuseSteps(3);
        let mut ctrl = Controller::new(&tm.g_tilde, &tm.r_tilde, opts, 43).unwrap();
        ctrl.set_g_hat(tm.g_tilde.clone()).unwrap();
        let n = 8;
        let sched = ctrl.sweep(&tm.f_tilde, n, 0).unwrap();
        // Stored at execution times with (n-1-t) % 3 == 0: t = 7, 4, 1.
        assert_eq!(sched.len(), 3);
        let yhat = DVector::from_vec(vec![0.5, 0.1]);
        // Every execution time resolves to the nearest later snapshot.
        for t in 0..n {
            let u = ctrl.control_at(&sched, t, &yhat, &tm.f_tilde).unwrap();
            assert!(u.iter().all(|x| x.is_finite()));
        }
        // t = 2 and t = 3 reuse the t = 4 snapshot exactly.
        let u2 = ctrl.control_at(&sched, 2, &yhat, &tm.f_tilde).unwrap();
        let u3 = ctrl.control_at(&sched, 3, &yhat, &tm.f_tilde).unwrap();
        let u4 = ctrl.control_at(&sched, 4, &yhat, &tm.f_tilde).unwrap();
        assert_eq!(u2, u4);
        assert_eq!(u3, u4);
    }

    #[test]
    fn missing_snapshot_is_a_schedule_error() {
        let tm = benchmark_tm();
        let mut ctrl =
            Controller::new(&tm.g_tilde, &tm.r_tilde, ControllerOptions::new(1_000), 37).unwrap();
        ctrl.set_g_hat(tm.g_tilde.clone()).unwrap();
        let sched = ctrl.sweep(&tm.f_tilde, 4, 1).unwrap();
        let y = DVector::zeros(2);
        assert!(matches!(
            ctrl.control_at(&sched, 0, &y, &tm.f_tilde),
            Err(Error::Schedule(0))
        ));
        assert!(matches!(
            ctrl.control_at(&sched, 4, &y, &tm.f_tilde),
            Err(Error::Schedule(4))
        ));
    }

    #[test]
    fn control_trivial_cases() {
        let tm = benchmark_tm();
        let rep = CovarianceRep::from_matrix(
            &(&tm.g_tilde + &tm.r_tilde),
            RepMethod::series_default(),
        )
        .unwrap();

        // At the target, no control is issued.
        let u = control_from_rep(&rep, &tm.g_tilde, &tm.f_tilde, &DVector::zeros(2)).unwrap();
        assert!(u.norm() < 1e-15);

        // T = ĝ cancels exactly.
        let rep_g = CovarianceRep::from_matrix(&tm.g_tilde, RepMethod::series_default()).unwrap();
        let y = DVector::from_vec(vec![0.3, 0.4]);
        let u = control_from_rep(&rep_g, &tm.g_tilde, &tm.f_tilde, &y).unwrap();
        assert!(u.norm() < 1e-7, "norm {}", u.norm());
    }

    #[test]
    fn scalar_control_matches_classical_gain() {
        // Full-rank scalar system: ũ at t0 must equal -HB L x̂ mapped
        // through the measurement space.
        let f = DMatrix::from_element(1, 1, 0.9);
        let b = DMatrix::from_element(1, 1, 0.7);
        let h = DMatrix::from_element(1, 1, 2.0);
        let model = LdsModel::new(
            f,
            b,
            h.clone(),
            DMatrix::from_element(1, 1, 1e-6),
            DMatrix::from_element(1, 1, 1e-6),
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.3),
        )
        .unwrap();
        let tm = derive_transformed(&model).unwrap();
        let n = 6;
        let sched_classical = crate::oracle::kc_backward(&model, n, 0).unwrap();

        let mut ctrl =
            Controller::new(&tm.g_tilde, &tm.r_tilde, ControllerOptions::new(200_000), 41).unwrap();
        ctrl.set_g_hat(tm.g_tilde.clone()).unwrap();
        let sched = ctrl.sweep(&tm.f_tilde, n, 0).unwrap();

        let yhat = DVector::from_vec(vec![0.9]);
        for t in 0..n {
            let u_tilde = ctrl.control_at(&sched, t, &yhat, &tm.f_tilde).unwrap();
            // Classical: u = -L_t x̂ with x̂ = H⁻¹ŷ; compare in ũ space.
            let xhat = h.clone().try_inverse().unwrap() * &yhat;
            let u_classical = -(sched_classical.gain(t).unwrap() * xhat);
            let u_tilde_classical = tm.u_tilde_of(&u_classical);
            let rel = (&u_tilde - &u_tilde_classical).norm() / u_tilde_classical.norm();
            assert!(rel < 0.02, "t = {t}: {u_tilde} vs {u_tilde_classical}");
        }
    }
}
