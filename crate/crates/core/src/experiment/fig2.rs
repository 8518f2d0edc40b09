//! Filter-learning comparison runs.
//!
//! Four computations of the blending entry `(I - HK)_{22} = (RZ⁻¹)_{22}`
//! against time, all on the same plant:
//!
//! - `run1`: classical covariance recursion;
//! - `run1p`: the measurement-space matrix recursion (identical results);
//! - `run2`: ensemble learner, one feature tracked for many steps
//!             (recency-weighted covariance estimate);
//! - `run3`: ensemble learner, many features for a few steps, covariance
//!             updated incrementally feature by feature;
//! - `run4`: as `run3` but with the dynamics matrix learned from the
//!             measurement stream as well (raw regression on the first step,
//!             refined regression on filtered estimates afterwards). Its
//!             plot time is left-shifted by one to absorb the startup step.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::estimator::{AdaptiveConfig, EstimatorOptions, EstimatorState, FInit, ZInit};
use crate::experiment::config::ExperimentConfig;
use crate::experiment::output::Fig2Record;
use crate::lds::{simulate_ensemble, InitialState, LdsModel};
use crate::oracle::{
    derive_transformed, gain_from_z, kf_learn_step, z_step, KfState, TransformedModel,
};
use crate::rates::MurataParams;
use crate::rng::derive_seed;

/// Everything the CSV and the summary need from one full experiment.
#[derive(Debug, Clone)]
pub struct Fig2Outcome {
    pub records: Vec<Fig2Record>,
    pub summary: Fig2Summary,
    pub config_echo: String,
}

#[derive(Debug, Clone)]
pub struct Fig2Summary {
    /// Largest absolute difference between the two oracle paths.
    pub oracle_paths_max_gap: f64,
    /// Mean of the single-feature gain over the trailing 100 steps.
    pub run2_terminal_mean: f64,
    /// Final per-seed gain of the ensemble run (last feature, last step).
    pub run3_terminal: Vec<f64>,
    /// Final per-seed learned dynamics entry of the system-identification run.
    pub run4_final_f22: Vec<f64>,
    /// True transformed dynamics entry.
    pub true_f22: f64,
    /// Steady-state blending entry from the oracle recursion.
    pub steady_gain22: f64,
}

/// Iterate the measurement-space covariance recursion to its fixed point and
/// return the steady blending matrix `RZ⁻¹`.
pub fn steady_gain(tm: &TransformedModel) -> Result<DMatrix<f64>> {
    let mut z = &tm.hqh + &tm.r;
    for _ in 0..10_000 {
        let next = z_step(tm, &z)?;
        let gap = (&next - &z).norm() / z.norm().max(1e-300);
        z = next;
        if gap < 1e-14 {
            break;
        }
    }
    gain_from_z(&tm.r, &z)
}

/// Classical and measurement-space oracle gain paths from the same start,
/// `steps + 1` entries each (index 0 is the arbitrary initial gain).
pub fn run1_paths(
    model: &LdsModel,
    tm: &TransformedModel,
    p0: &DMatrix<f64>,
    steps: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut classical = Vec::with_capacity(steps + 1);
    let mut transformed = Vec::with_capacity(steps + 1);

    let mut kf = KfState::new(p0.clone(), DVector::zeros(model.dx()));
    let mut z = &model.h * p0 * model.h.transpose() + &model.r_true;
    for _ in 0..=steps {
        // Classical: (I - HK) with K computed from the current P⁻.
        let learned = kf_learn_step(model, &kf)?;
        let ihk = DMatrix::identity(model.dy(), model.dy()) - &model.h * &learned.gain;
        classical.push(ihk[(1, 1)]);
        kf = learned;

        transformed.push(gain_from_z(&tm.r, &z)?[(1, 1)]);
        z = z_step(tm, &z)?;
    }
    Ok((classical, transformed))
}

fn estimator_options(
    cfg: &ExperimentConfig,
    gamma_z: f64,
    gamma_f: f64,
    refine_f: bool,
    f_init: FInit,
    adaptive: bool,
) -> Result<EstimatorOptions> {
    let method = cfg.estimator.rep_method()?;
    let mut opts = EstimatorOptions {
        method,
        gamma_f,
        gamma_r: 1.0,
        gamma_z,
        refine_f,
        z_init: ZInit::Auto,
        f_init,
        adaptive_z: None,
        adaptive_f: None,
        regime_window: cfg.estimator.regime_window,
        regime_factor: cfg.estimator.regime_factor,
        trace: true,
    };
    if adaptive {
        opts.adaptive_z = Some(AdaptiveConfig {
            params: MurataParams::covariance_default(),
            initial_rate: gamma_z,
        });
        if refine_f {
            opts.adaptive_f = Some(AdaptiveConfig {
                params: MurataParams::dynamics_default(),
                initial_rate: gamma_f,
            });
        }
    }
    Ok(opts)
}

/// Single-feature learner: returns the gain entry after each of
/// `cfg.fig2.run2_steps` steps.
pub fn run2(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<f64>> {
    let model = cfg.model.build()?;
    let tm = derive_transformed(&model)?;
    let init = cfg.model.initial_state(model.dx())?;
    let steps = cfg.fig2.run2_steps;
    let traj = &simulate_ensemble(&model, &init, 1, steps + 1, None, seed)?[0];

    let opts = estimator_options(
        cfg,
        cfg.fig2.run2_gamma_z,
        0.0,
        false,
        FInit::Matrix(tm.f_tilde.clone()),
        cfg.fig2.adaptive,
    )?;
    let mut est = EstimatorState::new(model.dy(), 1, opts, derive_seed(seed, 2))?;
    est.set_r_hat(model.r_true.clone())?;
    est.enter_kalman(&[traj.measurements[0].clone()])?;

    let zero_u = DVector::zeros(model.dy());
    let mut gains = Vec::with_capacity(steps);
    for t in 1..=steps {
        let trace = est.kalman_step(&[traj.measurements[t].clone()], &zero_u)?;
        gains.push(trace.gain_entry[0]);
    }
    Ok(gains)
}

/// Ensemble-learner output: the traced entries after every feature update.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    /// `per_step[t-1][p-1]` is the gain entry after feature `p` of step `t`.
    pub gain_per_step: Vec<Vec<f64>>,
    /// Same layout for the learned dynamics entry.
    pub f_per_step: Vec<Vec<f64>>,
    pub initial_f22: f64,
    pub final_f22: f64,
}

impl EnsembleRun {
    pub fn terminal_gain(&self) -> f64 {
        *self
            .gain_per_step
            .last()
            .and_then(|s| s.last())
            .expect("at least one step")
    }
}

/// Many-feature learner, covariance updated incrementally per feature.
/// `learn_f = false` keeps the oracle dynamics (run 3); `learn_f = true`
/// learns them from the stream with an arbitrary start (run 4, one extra
/// startup step).
pub fn run_ensemble(cfg: &ExperimentConfig, seed: u64, learn_f: bool) -> Result<EnsembleRun> {
    let model = cfg.model.build()?;
    let tm = derive_transformed(&model)?;
    let init = cfg.model.initial_state(model.dx())?;
    let n_feat = cfg.fig2.run3_n_feat;
    let steps = if learn_f {
        cfg.fig2.run3_steps + 1
    } else {
        cfg.fig2.run3_steps
    };
    let trajs = simulate_ensemble(&model, &init, n_feat, steps + 1, None, seed)?;

    let f_init = if learn_f {
        FInit::RandomUniform { scale: 0.1 }
    } else {
        FInit::Matrix(tm.f_tilde.clone())
    };
    let opts = estimator_options(
        cfg,
        cfg.fig2.run3_gamma_z / n_feat as f64,
        cfg.fig2.run4_gamma_f / n_feat as f64,
        learn_f,
        f_init,
        cfg.fig2.adaptive,
    )?;
    let mut est = EstimatorState::new(model.dy(), n_feat, opts, derive_seed(seed, 4))?;
    est.set_r_hat(model.r_true.clone())?;
    let initial_f22 = est.f_hat()[(1, 1)];
    let y0: Vec<DVector<f64>> = trajs.iter().map(|t| t.measurements[0].clone()).collect();
    est.enter_kalman(&y0)?;

    let zero_u = DVector::zeros(model.dy());
    let mut gain_per_step = Vec::with_capacity(steps);
    let mut f_per_step = Vec::with_capacity(steps);
    for t in 1..=steps {
        let y: Vec<DVector<f64>> = trajs.iter().map(|tr| tr.measurements[t].clone()).collect();
        let trace = est.kalman_step(&y, &zero_u)?;
        gain_per_step.push(trace.gain_entry);
        f_per_step.push(trace.f_entry);
    }
    Ok(EnsembleRun {
        gain_per_step,
        f_per_step,
        initial_f22,
        final_f22: est.f_hat()[(1, 1)],
    })
}

/// Full experiment: all runs, all seeds, CSV records plus summary.
pub fn run_fig2(cfg: &ExperimentConfig) -> Result<Fig2Outcome> {
    let model = cfg.model.build()?;
    let tm = derive_transformed(&model)?;
    let init = cfg.model.initial_state(model.dx())?;
    let true_f22 = tm.f_tilde[(1, 1)];
    let base_seed = cfg.run.seed;
    let mut records = Vec::new();

    // Oracle paths.
    let (classical, transformed) = run1_paths(&model, &tm, &init.cov, cfg.fig2.run1_steps)?;
    let oracle_paths_max_gap = classical
        .iter()
        .zip(transformed.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    if oracle_paths_max_gap > 1e-10 {
        return Err(crate::error::Error::Diverged(format!(
            "classical and measurement-space gain paths disagree by {oracle_paths_max_gap:.3e}"
        )));
    }
    for (t, (a, b)) in classical.iter().zip(transformed.iter()).enumerate() {
        records.push(Fig2Record {
            method: "run1".into(),
            seed: base_seed,
            t_plot: t as i64,
            feature: 0,
            ihk22: *a,
            f22: true_f22,
        });
        records.push(Fig2Record {
            method: "run1p".into(),
            seed: base_seed,
            t_plot: t as i64,
            feature: 0,
            ihk22: *b,
            f22: true_f22,
        });
    }

    // Single feature, long run (base seed only).
    let gains2 = run2(cfg, base_seed)?;
    for (i, g) in gains2.iter().enumerate() {
        records.push(Fig2Record {
            method: "run2".into(),
            seed: base_seed,
            t_plot: (i + 1) as i64,
            feature: 0,
            ihk22: *g,
            f22: true_f22,
        });
    }
    let tail = gains2.len().min(100);
    let run2_terminal_mean = gains2[gains2.len() - tail..].iter().sum::<f64>() / tail as f64;

    // Ensemble runs over all seeds.
    let mut run3_terminal = Vec::new();
    let mut run4_final_f22 = Vec::new();
    for &seed in &cfg.seeds() {
        let r3 = run_ensemble(cfg, seed, false)?;
        for (t_idx, (gains, fs)) in r3
            .gain_per_step
            .iter()
            .zip(r3.f_per_step.iter())
            .enumerate()
        {
            for (p, (g, f)) in gains.iter().zip(fs.iter()).enumerate() {
                records.push(Fig2Record {
                    method: "run3".into(),
                    seed,
                    t_plot: (t_idx + 1) as i64,
                    feature: p + 1,
                    ihk22: *g,
                    f22: *f,
                });
            }
        }
        run3_terminal.push(r3.terminal_gain());

        let r4 = run_ensemble(cfg, seed, true)?;
        for (t_idx, (gains, fs)) in r4
            .gain_per_step
            .iter()
            .zip(r4.f_per_step.iter())
            .enumerate()
        {
            for (p, (g, f)) in gains.iter().zip(fs.iter()).enumerate() {
                records.push(Fig2Record {
                    method: "run4".into(),
                    seed,
                    // Left-shift by one plot unit: the first step is startup.
                    t_plot: t_idx as i64,
                    feature: p + 1,
                    ihk22: *g,
                    f22: *f,
                });
            }
        }
        run4_final_f22.push(r4.final_f22);
    }

    let steady_gain22 = steady_gain(&tm)?[(1, 1)];
    Ok(Fig2Outcome {
        records,
        summary: Fig2Summary {
            oracle_paths_max_gap,
            run2_terminal_mean,
            run3_terminal,
            run4_final_f22,
            true_f22,
            steady_gain22,
        },
        config_echo: cfg.echo_toml(),
    })
}

/// Initial-state helper shared with other experiments.
pub fn model_and_init(cfg: &ExperimentConfig) -> Result<(LdsModel, TransformedModel, InitialState)> {
    let model = cfg.model.build()?;
    let tm = derive_transformed(&model)?;
    let init = cfg.model.initial_state(model.dx())?;
    Ok((model, tm, init))
}
