//! Seeded Monte-Carlo and exact-algebra invariant checks.
//!
//! Each check returns a [`Check`] with a pass flag and a human-readable
//! detail line; the CLI prints them and the acceptance suite asserts them.

use nalgebra::{DMatrix, DVector};

use crate::controller::{Controller, ControllerOptions};
use crate::covariance::{CovarianceRep, RepMethod};
use crate::lds::{sample_gaussian, simulate_ensemble, InitialState, LdsModel};
use crate::linalg::{psd_factor, rel_frobenius_gap, spd_solve_vec, symmetrize};
use crate::oracle::{derive_transformed, gain_from_z, kc_backward, kf_learn_step, t_step, z_step,
    KfState};
use crate::rng::{derive_seed, RngStream};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            pass,
            detail,
        }
    }
}

fn sample_cov(vs: &[DVector<f64>]) -> DMatrix<f64> {
    let d = vs[0].len();
    let mut m = DMatrix::zeros(d, d);
    for v in vs {
        m += v * v.transpose();
    }
    m / vs.len() as f64
}

/// Batch with an exactly prescribed second moment (scaled factor columns).
pub fn batch_with_moment(cov: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let n = cov.nrows();
    let l = psd_factor(cov).expect("PSD moment");
    (0..n)
        .map(|j| DVector::from_column_slice((l.column(j) * (n as f64).sqrt()).as_slice()))
        .collect()
}

/// Random orthogonal matrix via QR of a Gaussian matrix.
fn random_orthogonal(rng: &mut RngStream, d: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| rng.standard_normal());
    m.qr().q()
}

/// Random symmetric PD matrix with eigenvalues in `[lo, hi]`.
fn random_pd(rng: &mut RngStream, d: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let q = random_orthogonal(rng, d);
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        m[(i, i)] = rng.uniform(lo, hi);
    }
    symmetrize(&(&q * m * q.transpose()))
}

/// Random stable model with well-conditioned full-rank `H` and `B`.
pub fn random_stable_model(seed: u64, d: usize) -> LdsModel {
    let mut rng = RngStream::new(seed, 0);
    let f_raw = DMatrix::from_fn(d, d, |_, _| rng.standard_normal());
    let f = &f_raw * (0.9 / f_raw.norm().max(1e-9));
    let h = {
        let u = random_orthogonal(&mut rng, d);
        let v = random_orthogonal(&mut rng, d);
        let mut s = DMatrix::zeros(d, d);
        for i in 0..d {
            s[(i, i)] = rng.uniform(0.5, 1.5);
        }
        u * s * v.transpose()
    };
    let b = {
        let u = random_orthogonal(&mut rng, d);
        let v = random_orthogonal(&mut rng, d);
        let mut s = DMatrix::zeros(d, d);
        for i in 0..d {
            s[(i, i)] = rng.uniform(0.5, 1.5);
        }
        u * s * v.transpose()
    };
    let q = random_pd(&mut rng, d, 1e-4, 1e-3);
    let r = random_pd(&mut rng, d, 1e-4, 1e-3);
    let g = random_pd(&mut rng, d, 0.2, 2.0);
    let r_cost = random_pd(&mut rng, d, 0.2, 2.0);
    LdsModel::new(f, b, h, q, r, g, r_cost).expect("random model is valid")
}

/// Noise sampling statistics: means within 4 standard errors, covariance
/// within 5% relative Frobenius error.
pub fn noise_statistics(seed: u64, n: usize) -> Check {
    let covs = [
        DMatrix::identity(2, 2) * 1e-5,
        DMatrix::identity(2, 2) * 1e-4,
        DMatrix::from_row_slice(2, 2, &[2e-4, 5e-5, 5e-5, 1e-4]),
    ];
    let mut worst_mean = 0.0_f64;
    let mut worst_cov = 0.0_f64;
    for (k, cov) in covs.iter().enumerate() {
        let mut rng = RngStream::new(derive_seed(seed, k as u64), 0);
        let draws: Vec<DVector<f64>> = (0..n)
            .map(|_| sample_gaussian(cov, &mut rng).expect("valid covariance"))
            .collect();
        let mut mean = DVector::zeros(2);
        for d in &draws {
            mean += d;
        }
        mean /= n as f64;
        for i in 0..2 {
            let se = (cov[(i, i)] / n as f64).sqrt();
            worst_mean = worst_mean.max(mean[i].abs() / se.max(1e-300));
        }
        worst_cov = worst_cov.max(rel_frobenius_gap(&sample_cov(&draws), cov));
    }
    Check::new(
        "noise statistics",
        worst_mean < 4.0 && worst_cov < 0.05,
        format!("worst mean {worst_mean:.2} SE, worst covariance gap {worst_cov:.4}"),
    )
}

/// Error-ensemble covariance consistency: evolve `η` with oracle weights and
/// the oracle covariance path applied; the sample covariance must track the
/// matrix recursion within `tol` at every step.
pub fn eta_covariance_consistency(seed: u64, n_feat: usize, steps: usize, tol: f64) -> Check {
    let model = LdsModel::planar_rotations(15.0, 50.0, 1e-5, 1e-4);
    let tm = derive_transformed(&model).expect("benchmark transforms");
    let init = InitialState::default_for(2);
    let trajs = simulate_ensemble(&model, &init, n_feat, steps + 1, None, seed)
        .expect("ensemble simulation");

    // ŷ⁻_0 = 0 for every feature: η_0 = -y_0 and
    // Z_0 = H E(x0 x0') H' + R exactly.
    let ex0 = &init.cov + &init.mean * init.mean.transpose();
    let mut z = &model.h * ex0 * model.h.transpose() + &model.r_true;
    let mut etas: Vec<DVector<f64>> = trajs.iter().map(|t| -t.measurements[0].clone()).collect();

    let mut worst = 0.0_f64;
    for t in 0..steps {
        worst = worst.max(rel_frobenius_gap(&sample_cov(&etas), &z));
        let rz = gain_from_z(&tm.r, &z).expect("gain");
        for (p, e) in etas.iter_mut().enumerate() {
            let y_t = &trajs[p].measurements[t];
            let y_next = &trajs[p].measurements[t + 1];
            *e = &tm.f_tilde * (y_t + &rz * &*e) - y_next;
        }
        z = z_step(&tm, &z).expect("z step");
    }
    worst = worst.max(rel_frobenius_gap(&sample_cov(&etas), &z));
    Check::new(
        "eta covariance consistency",
        worst < tol,
        format!("max relative gap {worst:.4} over {steps} steps, {n_feat} features"),
    )
}

/// Control-ensemble covariance consistency: one backward step from each
/// oracle `T_τ` preserves `E(ww') = T` within `tol` along the whole path.
pub fn w_covariance_consistency(seed: u64, n_w: usize, steps: usize, tol: f64) -> Check {
    let model = LdsModel::planar_rotations(15.0, 50.0, 1e-5, 1e-4);
    let tm = derive_transformed(&model).expect("benchmark transforms");
    let mut ctrl = Controller::new(
        &tm.g_tilde,
        &tm.r_tilde,
        ControllerOptions::new(n_w),
        derive_seed(seed, 7),
    )
    .expect("controller");
    ctrl.set_g_hat(tm.g_tilde.clone()).expect("dims");
    ctrl.init_w_ensemble(steps, 0).expect("init");

    let mut t_oracle = &tm.g_tilde + &tm.r_tilde;
    let mut worst = rel_frobenius_gap(&sample_cov(&ctrl.w_ensemble()), &t_oracle);
    for _ in 0..steps {
        // Feed the oracle representation, then take one member step.
        ctrl.set_t_rep_from_matrix(&t_oracle).expect("rep");
        ctrl.step_backward(&tm.f_tilde).expect("step");
        t_oracle = t_step(&tm, &t_oracle).expect("t step");
        worst = worst.max(rel_frobenius_gap(&sample_cov(&ctrl.w_ensemble()), &t_oracle));
    }
    Check::new(
        "w covariance consistency",
        worst < tol,
        format!("max relative gap {worst:.4} over {steps} backward steps, {n_w} members"),
    )
}

/// Exact fixed points of the covariance learning rules, both forms.
pub fn learning_rule_fixed_points() -> Check {
    let targets = [
        DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.0]),
        DMatrix::from_row_slice(3, 3, &[1.5, 0.2, 0.0, 0.2, 0.9, 0.1, 0.0, 0.1, 2.2]),
    ];
    let mut worst = 0.0_f64;
    for t in &targets {
        let batch = batch_with_moment(t);
        let mut rep = CovarianceRep::from_matrix(t, RepMethod::series_default()).expect("rep");
        rep.learn_batch(&batch, 0.7).expect("update");
        worst = worst.max((rep.matrix().expect("matrix") - t).norm());

        let mut rep = CovarianceRep::from_matrix(t, RepMethod::Inverse).expect("rep");
        let before = rep.inverse_matrix().expect("inv");
        rep.learn_batch(&batch, 0.02).expect("update");
        worst = worst.max((rep.inverse_matrix().expect("inv") - before).norm());
    }
    Check::new(
        "learning-rule fixed points",
        worst < 1e-12,
        format!("max drift {worst:.3e}"),
    )
}

/// Series-form inverse application against a direct solve on random PD
/// matrices with condition number up to 1e3.
pub fn series_inverse_accuracy(seed: u64) -> Check {
    let mut worst = 0.0_f64;
    for k in 0..20 {
        let mut rng = RngStream::new(derive_seed(seed, 100 + k), 0);
        let d = 2 + (k % 2) as usize;
        let cond: f64 = rng.uniform(1.0, 3.0);
        let z = random_pd(&mut rng, d, 1.0, 10.0_f64.powf(cond));
        let rep = CovarianceRep::from_matrix(
            &z,
            RepMethod::Series {
                passes: 100_000,
                tol: 1e-12,
            },
        )
        .expect("rep");
        let v = rng.normal_vector(d);
        let direct = spd_solve_vec(&z, &v).expect("solve");
        let series = rep.apply_inverse(&v).expect("series");
        worst = worst.max((direct - series).norm() / v.norm());
    }
    Check::new(
        "series inverse accuracy",
        worst < 1e-8,
        format!("max deviation {worst:.3e}"),
    )
}

/// Raw dynamics-learning update against central finite differences of
/// `(1/2) mean ||F y + u - y'||^2` on 3-d instances.
pub fn gradient_check(seed: u64) -> Check {
    let dy = 3;
    let mut rng = RngStream::new(seed, 0);
    let f0 = DMatrix::from_fn(dy, dy, |_, _| rng.standard_normal());
    let u = rng.normal_vector(dy);
    let y_prev: Vec<DVector<f64>> = (0..50).map(|_| rng.normal_vector(dy)).collect();
    let y_now: Vec<DVector<f64>> = (0..50).map(|_| rng.normal_vector(dy)).collect();
    let loss = |f: &DMatrix<f64>| -> f64 {
        let mut s = 0.0;
        for (yp, yn) in y_prev.iter().zip(y_now.iter()) {
            s += (f * yp + &u - yn).norm_squared();
        }
        0.5 * s / y_prev.len() as f64
    };
    let mut update = DMatrix::zeros(dy, dy);
    for (yp, yn) in y_prev.iter().zip(y_now.iter()) {
        update += (&f0 * yp + &u - yn) * yp.transpose();
    }
    update /= y_prev.len() as f64;

    let h = 1e-6;
    let mut worst = 0.0_f64;
    for i in 0..dy {
        for j in 0..dy {
            let mut fp = f0.clone();
            fp[(i, j)] += h;
            let mut fm = f0.clone();
            fm[(i, j)] -= h;
            let fd = (loss(&fp) - loss(&fm)) / (2.0 * h);
            worst = worst.max((update[(i, j)] - fd).abs() / fd.abs().max(1e-12));
        }
    }
    Check::new(
        "dynamics-learning gradient",
        worst < 1e-6,
        format!("max relative deviation {worst:.3e}"),
    )
}

/// Symmetry of the inverse-form representation under noisy updates.
pub fn inverse_symmetry(seed: u64) -> Check {
    let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
    let mut rep = CovarianceRep::from_matrix(&z, RepMethod::Inverse).expect("rep");
    let mut rng = RngStream::new(seed, 0);
    let mut worst = 0.0_f64;
    for _ in 0..2_000 {
        let s = rng.normal_vector(2);
        rep.learn_one(&s, 0.01).expect("update");
        worst = worst.max(rep.symmetry_defect());
    }
    Check::new(
        "inverse symmetry",
        worst < 1e-10,
        format!("max relative asymmetry {worst:.3e}"),
    )
}

/// Estimation equivalence on random stable full-rank models: the
/// measurement-space covariance path must match `HP⁻H' + R` from the
/// classical recursion within `tol` (Frobenius) for `steps` steps.
pub fn estimation_equivalence(base_seed: u64, n_models: usize, steps: usize, tol: f64) -> Check {
    let mut worst = 0.0_f64;
    for k in 0..n_models {
        let d = 2 + (k % 2);
        let model = random_stable_model(derive_seed(base_seed, k as u64), d);
        let tm = derive_transformed(&model).expect("transforms");
        let mut rng = RngStream::new(derive_seed(base_seed, 1000 + k as u64), 0);
        let p0 = random_pd(&mut rng, d, 0.1, 1.0);
        let mut z = &model.h * &p0 * model.h.transpose() + &model.r_true;
        let mut kf = KfState::new(p0, DVector::zeros(d));
        for _ in 0..steps {
            kf = kf_learn_step(&model, &kf).expect("learn step");
            z = z_step(&tm, &z).expect("z step");
            let z_ref = &model.h * &kf.p_minus * model.h.transpose() + &model.r_true;
            worst = worst.max((&z - z_ref).norm());
        }
    }
    Check::new(
        "estimation equivalence",
        worst < tol,
        format!("max Frobenius gap {worst:.3e} over {n_models} models x {steps} steps"),
    )
}

/// Control equivalence on random stable full-rank models: the transformed
/// backward path maps onto the classical one via `S = H'(T - g̃)H`, and the
/// transformed control gain equals `-HBLH⁺`, both within `tol`.
pub fn control_equivalence(base_seed: u64, n_models: usize, steps: usize, tol: f64) -> Check {
    let mut worst = 0.0_f64;
    for k in 0..n_models {
        let d = 2 + (k % 2);
        let model = random_stable_model(derive_seed(base_seed, 5000 + k as u64), d);
        let tm = derive_transformed(&model).expect("transforms");
        let sched = kc_backward(&model, steps, 0).expect("backward recursion");
        let h_pinv = crate::linalg::pseudo_inverse(&model.h).expect("pinv").m;

        let mut t = &tm.r_tilde + &tm.g_tilde;
        for back in 0..steps {
            let tau = steps - back;
            let s_ref = sched.s_at(tau).expect("s entry");
            let s_mapped = model.h.transpose() * (&t - &tm.g_tilde) * &model.h;
            worst = worst.max((s_mapped - s_ref).norm());

            let l_tilde = crate::oracle::control_gain_from_t(&tm, &t).expect("gain");
            let l_classical = sched.gain(tau - 1).expect("gain entry");
            let mapped = -(&tm.hb * l_classical * &h_pinv);
            worst = worst.max((l_tilde - mapped).norm());

            t = t_step(&tm, &t).expect("t step");
        }
        let s_mapped = model.h.transpose() * (&t - &tm.g_tilde) * &model.h;
        worst = worst.max((s_mapped - sched.s_at(0).expect("s entry")).norm());
    }
    Check::new(
        "control equivalence",
        worst < tol,
        format!("max Frobenius gap {worst:.3e} over {n_models} models x {steps} steps"),
    )
}

/// Internal-noise independence accounting in the controller's backward step.
pub fn noise_independence(seed: u64, n_w: usize) -> Check {
    let model = LdsModel::planar_rotations(15.0, 50.0, 1e-5, 1e-4);
    let tm = derive_transformed(&model).expect("transforms");
    let mut ctrl = Controller::new(
        &tm.g_tilde,
        &tm.r_tilde,
        ControllerOptions::new(n_w),
        seed,
    )
    .expect("controller");
    ctrl.set_g_hat(tm.g_tilde.clone()).expect("dims");
    ctrl.init_w_ensemble(4, 0).expect("init");

    let per_draw = 2 * n_w as u64;
    let (g0, r0) = ctrl.noise_draws();
    let counts_ok = g0 == per_draw && r0 == per_draw;

    let corr = {
        let mut c = DMatrix::zeros(2, 2);
        for (nu_g, w) in ctrl.member_pairs() {
            c += nu_g * w.transpose();
        }
        c / n_w as f64
    };
    let gap0 = rel_frobenius_gap(&corr, &(-&tm.g_tilde));

    ctrl.step_backward(&tm.f_tilde).expect("step");
    let (g1, r1) = ctrl.noise_draws();
    let counts_ok = counts_ok && (g1 - g0 == per_draw) && (r1 - r0 == per_draw);
    let corr = {
        let mut c = DMatrix::zeros(2, 2);
        for (nu_g, w) in ctrl.member_pairs() {
            c += nu_g * w.transpose();
        }
        c / n_w as f64
    };
    let gap1 = rel_frobenius_gap(&corr, &(-&tm.g_tilde));

    Check::new(
        "noise independence bookkeeping",
        counts_ok && gap0 < 0.05 && gap1 < 0.05,
        format!("draw counts ok: {counts_ok}; E(ν^g w') gaps {gap0:.4}, {gap1:.4}"),
    )
}

/// The default invariant suite at spec scale.
pub fn standard_suite(seed: u64) -> Vec<Check> {
    vec![
        noise_statistics(seed, 100_000),
        eta_covariance_consistency(seed, 100_000, 10, 0.03),
        w_covariance_consistency(seed, 100_000, 10, 0.03),
        learning_rule_fixed_points(),
        series_inverse_accuracy(seed),
        gradient_check(seed),
        inverse_symmetry(seed),
        noise_independence(seed, 100_000),
    ]
}

/// The oracle-equivalence suite at spec scale.
pub fn equivalence_suite(seed: u64) -> Vec<Check> {
    vec![
        estimation_equivalence(seed, 20, 50, 1e-9),
        control_equivalence(seed, 20, 20, 1e-9),
    ]
}
