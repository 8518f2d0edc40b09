//! Closed-loop controller comparison.
//!
//! Per seed, the same plant-noise realization is rolled out under three
//! controllers: the full neural stack (offline `R̂`/`ĝ` learning, ensemble
//! system identification and filter learning, backward control-matrix
//! learning), the classical Kalman filter + controller, and zero control.
//! Measurement-space controls are actuated through `u = (HB)⁺ũ` and fed
//! back to the predictor as efference copies.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::controller::{Controller, ControllerOptions};
use crate::error::Result;
use crate::estimator::{EstimatorOptions, EstimatorState, FInit, ZInit};
use crate::experiment::config::ExperimentConfig;
use crate::lds::{
    measure, sample_gaussian, simulate_ensemble, step_plant, InitialState,
    LdsModel, PlantState, STREAM_INIT, STREAM_MEAS, STREAM_PLANT,
};
use crate::linalg::rel_frobenius_gap;
use crate::oracle::{derive_transformed, kc_backward, kf_learn_step, t_step, KfState,
    TransformedModel};
use crate::rng::{derive_seed, stream_id, RngStream};

#[derive(Debug, Clone, Copy, Default)]
pub struct CostStats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl CostStats {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlDemoOutcome {
    pub neural: CostStats,
    pub classical: CostStats,
    pub zero: CostStats,
    /// `(seed, J_neural, J_classical, J_zero)`.
    pub per_seed: Vec<(u64, f64, f64, f64)>,
    /// Relative deviation of the learned control matrices from the oracle
    /// path, per execution time (first seed).
    pub t_path_deviation: Vec<f64>,
    /// `(t, ũ_neural, ũ_classical)` for the first seed.
    pub u_sequences: Vec<(usize, Vec<f64>, Vec<f64>)>,
    pub config_echo: String,
}

struct SeedResult {
    j_neural: f64,
    j_classical: f64,
    j_zero: f64,
    t_path_deviation: Vec<f64>,
    u_sequences: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

/// Pre-train the estimator on an uncontrolled ensemble: offline sensor-noise
/// learning for `R̂`, then joint dynamics + covariance learning.
fn pretrained_estimator(
    cfg: &ExperimentConfig,
    model: &LdsModel,
    init: &InitialState,
    seed: u64,
) -> Result<EstimatorState> {
    let n_feat = cfg.control_demo.pretrain_n_feat;
    let steps = cfg.control_demo.pretrain_steps;
    let opts = EstimatorOptions {
        method: cfg.estimator.rep_method()?,
        gamma_f: 1.0 / n_feat as f64,
        gamma_r: 1.0,
        gamma_z: 1.0 / n_feat as f64,
        refine_f: true,
        z_init: ZInit::Auto,
        f_init: FInit::RandomUniform { scale: 0.1 },
        adaptive_z: None,
        adaptive_f: None,
        regime_window: cfg.estimator.regime_window,
        regime_factor: cfg.estimator.regime_factor,
        trace: false,
    };
    let mut est = EstimatorState::new(model.dy(), n_feat, opts, derive_seed(seed, 0x51))?;

    est.begin_offline_sensor()?;
    let mut noise_rng = RngStream::new(derive_seed(seed, 0x52), 0);
    let draws: Vec<DVector<f64>> = (0..cfg.control_demo.g_samples)
        .map(|_| sample_gaussian(&model.r_true, &mut noise_rng))
        .collect::<Result<_>>()?;
    est.learn_r_offline(&draws)?;

    let trajs = simulate_ensemble(model, init, n_feat, steps + 1, None, derive_seed(seed, 0x53))?;
    let y0: Vec<DVector<f64>> = trajs.iter().map(|t| t.measurements[0].clone()).collect();
    est.enter_kalman(&y0)?;
    let zero_u = DVector::zeros(model.dy());
    for t in 1..=steps {
        let y: Vec<DVector<f64>> = trajs.iter().map(|tr| tr.measurements[t].clone()).collect();
        est.kalman_step(&y, &zero_u)?;
    }
    Ok(est)
}

fn rollout_streams(seed: u64) -> (RngStream, RngStream, RngStream) {
    (
        RngStream::new(seed, stream_id(STREAM_INIT, 0)),
        RngStream::new(seed, stream_id(STREAM_PLANT, 0)),
        RngStream::new(seed, stream_id(STREAM_MEAS, 0)),
    )
}

fn run_seed(
    cfg: &ExperimentConfig,
    model: &LdsModel,
    tm: &TransformedModel,
    init: &InitialState,
    seed: u64,
    record_details: bool,
) -> Result<SeedResult> {
    let n = cfg.control_demo.horizon;
    let t0 = 0usize;

    // --- neural stack ---
    let mut est = pretrained_estimator(cfg, model, init, seed)?;
    let mut ctrl = Controller::new(
        &tm.g_tilde,
        &tm.r_tilde,
        ControllerOptions {
            n_w: cfg.control_demo.n_w,
            method: cfg.estimator.rep_method()?,
            gamma_t: 1.0,
            storage: cfg.control_demo.storage_policy()?,
        },
        derive_seed(seed, 0x54),
    )?;
    ctrl.learn_g_offline(cfg.control_demo.g_samples)?;
    let f_hat = est.f_hat().clone();
    let schedule = ctrl.sweep(&f_hat, n, t0)?;

    let mut t_path_deviation = Vec::new();
    if record_details {
        // Oracle path: T at execution time t is the (t0 + 1 + t)-th entry
        // walking backward from T_N = g̃ + r̃.
        let mut oracle = vec![&tm.g_tilde + &tm.r_tilde];
        for _ in 0..(n - t0) {
            oracle.push(t_step(tm, oracle.last().expect("nonempty"))?);
        }
        // oracle[k] = T_{N-k}; execution at t uses T_{t+1}.
        for t in t0..n {
            if let Ok(rep) = schedule.rep_for(t) {
                let learned = rep.matrix()?;
                let oracle_t = &oracle[n - (t + 1)];
                t_path_deviation.push(rel_frobenius_gap(&learned, oracle_t));
            }
        }
    }

    let (mut init_rng, mut plant_rng, mut meas_rng) = rollout_streams(seed);
    let x0 = init.draw(&mut init_rng)?;
    let mut state = PlantState { x: x0.clone(), t: 0 };
    let mut u_tilde_prev = DVector::zeros(model.dy());
    let mut j_neural = 0.0;
    let mut u_neural_seq = Vec::new();
    for t in t0..n {
        let y = measure(model, &state, &mut meas_rng)?;
        if t == t0 {
            est.begin_tracking(&[y.clone()])?;
        } else {
            est.kalman_step(&[y.clone()], &u_tilde_prev)?;
        }
        let yhat = est.yhat_prev()[0].clone();
        let f_hat = est.f_hat().clone();
        let u_tilde = ctrl.control_at(&schedule, t, &yhat, &f_hat)?;
        let u = tm.plant_control(&u_tilde);
        j_neural += (u.transpose() * &model.g * &u)[(0, 0)]
            + (state.x.transpose() * &model.r_cost * &state.x)[(0, 0)];
        if record_details {
            u_neural_seq.push((t, u_tilde.as_slice().to_vec()));
        }
        state = step_plant(model, &state, &u, &mut plant_rng)?;
        u_tilde_prev = tm.u_tilde_of(&u);
    }
    j_neural += (state.x.transpose() * &model.r_cost * &state.x)[(0, 0)];

    // --- classical stack, same noise realization ---
    let sched = kc_backward(model, n, t0)?;
    let (mut init_rng, mut plant_rng, mut meas_rng) = rollout_streams(seed);
    let x0 = init.draw(&mut init_rng)?;
    let mut state = PlantState { x: x0.clone(), t: 0 };
    let mut kf = KfState::new(init.cov.clone(), init.mean.clone());
    let mut j_classical = 0.0;
    let mut u_classical_seq = Vec::new();
    for t in t0..n {
        let y = measure(model, &state, &mut meas_rng)?;
        kf = kf_learn_step(model, &kf)?;
        let innovation = &y - &model.h * &kf.xhat_minus;
        kf.xhat = &kf.xhat_minus + &kf.gain * innovation;
        let u = -(sched.gain(t)? * &kf.xhat);
        kf.xhat_minus = &model.f * &kf.xhat + &model.b * &u;
        j_classical += (u.transpose() * &model.g * &u)[(0, 0)]
            + (state.x.transpose() * &model.r_cost * &state.x)[(0, 0)];
        if record_details {
            u_classical_seq.push(tm.u_tilde_of(&u).as_slice().to_vec());
        }
        state = step_plant(model, &state, &u, &mut plant_rng)?;
    }
    j_classical += (state.x.transpose() * &model.r_cost * &state.x)[(0, 0)];

    // --- zero control, same noise realization ---
    let (mut init_rng, mut plant_rng, mut meas_rng) = rollout_streams(seed);
    let x0 = init.draw(&mut init_rng)?;
    let mut state = PlantState { x: x0, t: 0 };
    let zero_u = DVector::zeros(model.du());
    let mut j_zero = 0.0;
    for _t in t0..n {
        let _y = measure(model, &state, &mut meas_rng)?;
        j_zero += (state.x.transpose() * &model.r_cost * &state.x)[(0, 0)];
        state = step_plant(model, &state, &zero_u, &mut plant_rng)?;
    }
    j_zero += (state.x.transpose() * &model.r_cost * &state.x)[(0, 0)];

    let u_sequences = u_neural_seq
        .into_iter()
        .zip(u_classical_seq)
        .map(|((t, un), uc)| (t, un, uc))
        .collect();
    Ok(SeedResult {
        j_neural,
        j_classical,
        j_zero,
        t_path_deviation,
        u_sequences,
    })
}

/// Run the closed-loop comparison over `cfg.control_demo.n_seeds` seeds.
/// Seeds are independent and execute in parallel; results are ordered.
pub fn run_control_demo(cfg: &ExperimentConfig) -> Result<ControlDemoOutcome> {
    let model = cfg.model.build()?;
    let tm = derive_transformed(&model)?;
    let init = cfg.model.initial_state(model.dx())?;

    let seeds: Vec<u64> = (0..cfg.control_demo.n_seeds as u64)
        .map(|i| cfg.run.seed.wrapping_add(i))
        .collect();
    let results: Vec<(u64, SeedResult)> = seeds
        .par_iter()
        .map(|&seed| {
            run_seed(cfg, &model, &tm, &init, seed, seed == cfg.run.seed).map(|r| (seed, r))
        })
        .collect::<Result<_>>()?;

    let mut per_seed = Vec::with_capacity(results.len());
    let mut t_path_deviation = Vec::new();
    let mut u_sequences = Vec::new();
    for (seed, r) in &results {
        per_seed.push((*seed, r.j_neural, r.j_classical, r.j_zero));
        if *seed == cfg.run.seed {
            t_path_deviation = r.t_path_deviation.clone();
            u_sequences = r.u_sequences.clone();
        }
    }
    let j_n: Vec<f64> = per_seed.iter().map(|x| x.1).collect();
    let j_c: Vec<f64> = per_seed.iter().map(|x| x.2).collect();
    let j_z: Vec<f64> = per_seed.iter().map(|x| x.3).collect();
    Ok(ControlDemoOutcome {
        neural: CostStats::from_samples(&j_n),
        classical: CostStats::from_samples(&j_c),
        zero: CostStats::from_samples(&j_z),
        per_seed,
        t_path_deviation,
        u_sequences,
        config_echo: cfg.echo_toml(),
    })
}

/// Zero-noise, zero-initial-state sanity variant: every controller should
/// incur zero cost.
pub fn run_quiescent_check(cfg: &ExperimentConfig) -> Result<(f64, f64, f64)> {
    let mut cfg = cfg.clone();
    cfg.model.q = Some(vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
    // Exactly zero R makes the classical innovation covariance singular;
    // a vanishing floor keeps every filter defined.
    cfg.model.r = Some(vec![vec![1e-30, 0.0], vec![0.0, 1e-30]]);
    cfg.model.x0_mean = vec![0.0, 0.0];
    cfg.model.p0 = Some(vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
    cfg.control_demo.n_seeds = 1;
    cfg.control_demo.n_w = 1000;
    let model = cfg.model.build()?;
    let tm = derive_transformed(&model)?;
    let init = cfg.model.initial_state(model.dx())?;
    let r = run_seed(&cfg, &model, &tm, &init, cfg.run.seed, false)?;
    Ok((r.j_neural, r.j_classical, r.j_zero))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quiescent_plant_costs_nothing() {
        let cfg = ExperimentConfig::default();
        let (jn, jc, jz) = run_quiescent_check(&cfg).unwrap();
        assert!(jz < 1e-24, "zero control on a dead plant: {jz}");
        assert!(jc < 1e-24, "classical: {jc}");
        assert!(jn < 1e-24, "neural: {jn}");
    }

    #[test]
    fn small_demo_orders_costs_sensibly() {
        let mut cfg = ExperimentConfig::default();
        cfg.control_demo.n_seeds = 24;
        cfg.control_demo.n_w = 2_000;
        cfg.control_demo.g_samples = 2_000;
        cfg.control_demo.pretrain_steps = 10;
        let out = run_control_demo(&cfg).unwrap();
        assert!(out.classical.mean < out.zero.mean);
        assert!(out.neural.mean < out.zero.mean);
        let gap = (out.neural.mean - out.classical.mean).abs() / out.classical.mean;
        assert!(gap < 0.25, "neural/classical gap {gap}");
        assert_eq!(out.per_seed.len(), 24);
        assert_eq!(out.u_sequences.len(), cfg.control_demo.horizon);
        assert!(!out.t_path_deviation.is_empty());
        for d in &out.t_path_deviation {
            assert!(*d < 0.2, "T-path deviation {d}");
        }
    }

    #[test]
    fn demo_is_deterministic() {
        let mut cfg = ExperimentConfig::default();
        cfg.control_demo.n_seeds = 4;
        cfg.control_demo.n_w = 500;
        cfg.control_demo.g_samples = 500;
        cfg.control_demo.pretrain_steps = 6;
        let a = run_control_demo(&cfg).unwrap();
        let b = run_control_demo(&cfg).unwrap();
        assert_eq!(a.per_seed, b.per_seed);
    }
}
