//! Experiment configuration: a line-oriented `key = value` format with
//! `[sections]` (TOML grammar). Every field has a default; unknown keys are
//! rejected. The effective configuration is echoed into each output
//! directory so a run can be reproduced from its artifacts alone.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lds::{InitialState, LdsModel};
use crate::linalg::rotation2;

fn default_f_deg() -> f64 {
    15.0
}
fn default_h_deg() -> f64 {
    50.0
}
fn default_q_scale() -> f64 {
    1e-5
}
fn default_r_scale() -> f64 {
    1e-4
}
fn default_unit() -> f64 {
    1.0
}
fn default_x0_mean() -> Vec<f64> {
    vec![1.0, 0.0]
}

/// Plant/measurement/cost specification. `F` and `H` may be given as 2-d
/// rotation angles (the default benchmark) or as explicit matrices; explicit
/// matrices win when both are present.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_f_deg")]
    pub f_rotation_deg: f64,
    #[serde(default = "default_h_deg")]
    pub h_rotation_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_q_scale")]
    pub q_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_r_scale")]
    pub r_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_unit")]
    pub g_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_unit")]
    pub r_cost_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_cost: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_x0_mean")]
    pub x0_mean: Vec<f64>,
    #[serde(default = "default_unit")]
    pub p0_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<Vec<Vec<f64>>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            f_rotation_deg: default_f_deg(),
            h_rotation_deg: default_h_deg(),
            f: None,
            h: None,
            b: None,
            q_scale: default_q_scale(),
            q: None,
            r_scale: default_r_scale(),
            r: None,
            g_scale: default_unit(),
            g: None,
            r_cost_scale: default_unit(),
            r_cost: None,
            x0_mean: default_x0_mean(),
            p0_scale: default_unit(),
            p0: None,
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Config(format!("{what}: empty matrix")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{what}: ragged or empty rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

impl ModelConfig {
    pub fn build(&self) -> Result<LdsModel> {
        let f = match &self.f {
            Some(rows) => rows_to_matrix(rows, "model.f")?,
            None => rotation2(self.f_rotation_deg),
        };
        let dx = f.nrows();
        let h = match &self.h {
            Some(rows) => rows_to_matrix(rows, "model.h")?,
            None => rotation2(self.h_rotation_deg),
        };
        let b = match &self.b {
            Some(rows) => rows_to_matrix(rows, "model.b")?,
            None => DMatrix::identity(dx, dx),
        };
        let q = match &self.q {
            Some(rows) => rows_to_matrix(rows, "model.q")?,
            None => DMatrix::identity(dx, dx) * self.q_scale,
        };
        let dy = h.nrows();
        let r = match &self.r {
            Some(rows) => rows_to_matrix(rows, "model.r")?,
            None => DMatrix::identity(dy, dy) * self.r_scale,
        };
        let du = b.ncols();
        let g = match &self.g {
            Some(rows) => rows_to_matrix(rows, "model.g")?,
            None => DMatrix::identity(du, du) * self.g_scale,
        };
        let r_cost = match &self.r_cost {
            Some(rows) => rows_to_matrix(rows, "model.r_cost")?,
            None => DMatrix::identity(dx, dx) * self.r_cost_scale,
        };
        LdsModel::new(f, b, h, q, r, g, r_cost).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn initial_state(&self, dx: usize) -> Result<InitialState> {
        if self.x0_mean.len() != dx {
            return Err(Error::Config(format!(
                "model.x0_mean has length {}, expected {dx}",
                self.x0_mean.len()
            )));
        }
        let cov = match &self.p0 {
            Some(rows) => rows_to_matrix(rows, "model.p0")?,
            None => DMatrix::identity(dx, dx) * self.p0_scale,
        };
        Ok(InitialState {
            mean: DVector::from_vec(self.x0_mean.clone()),
            cov,
        })
    }
}

fn default_z_method() -> u8 {
    1
}
fn default_neumann_passes() -> usize {
    // Ceiling only: the series exits early at tolerance. Transiently
    // ill-conditioned covariances (system identification startup, regime
    // changes) need far more than the typical few dozen passes.
    100_000
}
fn default_neumann_tol() -> f64 {
    1e-8
}
fn default_regime_window() -> usize {
    20
}
fn default_regime_factor() -> f64 {
    3.0
}

/// Generic estimator knobs shared by all runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    /// 1 = lateral-series representation, 2 = learned inverse.
    #[serde(default = "default_z_method")]
    pub z_method: u8,
    #[serde(default = "default_neumann_passes")]
    pub neumann_passes: usize,
    #[serde(default = "default_neumann_tol")]
    pub neumann_tol: f64,
    #[serde(default = "default_regime_window")]
    pub regime_window: usize,
    #[serde(default = "default_regime_factor")]
    pub regime_factor: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            z_method: default_z_method(),
            neumann_passes: default_neumann_passes(),
            neumann_tol: default_neumann_tol(),
            regime_window: default_regime_window(),
            regime_factor: default_regime_factor(),
        }
    }
}

impl EstimatorConfig {
    pub fn rep_method(&self) -> Result<crate::covariance::RepMethod> {
        match self.z_method {
            1 => Ok(crate::covariance::RepMethod::Series {
                passes: self.neumann_passes,
                tol: self.neumann_tol,
            }),
            2 => Ok(crate::covariance::RepMethod::Inverse),
            other => Err(Error::Config(format!(
                "estimator.z_method must be 1 or 2, got {other}"
            ))),
        }
    }
}

fn default_run1_steps() -> usize {
    7
}
fn default_run2_steps() -> usize {
    700
}
fn default_run2_gamma_z() -> f64 {
    0.01
}
fn default_run3_n_feat() -> usize {
    100
}
fn default_run3_gamma_z() -> f64 {
    1.0
}
fn default_run4_gamma_f() -> f64 {
    1.0
}

/// Filter-learning comparison runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fig2Config {
    #[serde(default = "default_run1_steps")]
    pub run1_steps: usize,
    #[serde(default = "default_run2_steps")]
    pub run2_steps: usize,
    /// Recency-weighted rate for the single-feature run.
    #[serde(default = "default_run2_gamma_z")]
    pub run2_gamma_z: f64,
    #[serde(default = "default_run3_n_feat")]
    pub run3_n_feat: usize,
    #[serde(default = "default_run1_steps")]
    pub run3_steps: usize,
    /// Total covariance rate for the ensemble runs; the per-feature rate is
    /// this divided by the feature count.
    #[serde(default = "default_run3_gamma_z")]
    pub run3_gamma_z: f64,
    /// Total dynamics-learning rate for the system-identification run.
    #[serde(default = "default_run4_gamma_f")]
    pub run4_gamma_f: f64,
    /// Adapt the learning rates online instead of holding them fixed.
    #[serde(default)]
    pub adaptive: bool,
}

impl Default for Fig2Config {
    fn default() -> Self {
        Self {
            run1_steps: default_run1_steps(),
            run2_steps: default_run2_steps(),
            run2_gamma_z: default_run2_gamma_z(),
            run3_n_feat: default_run3_n_feat(),
            run3_steps: default_run1_steps(),
            run3_gamma_z: default_run3_gamma_z(),
            run4_gamma_f: default_run4_gamma_f(),
            adaptive: false,
        }
    }
}

fn default_horizon() -> usize {
    5
}
fn default_n_w() -> usize {
    10_000
}
fn default_demo_seeds() -> usize {
    500
}
fn default_pretrain_steps() -> usize {
    12
}
fn default_pretrain_n_feat() -> usize {
    100
}
fn default_g_samples() -> usize {
    10_000
}
fn default_storage() -> String {
    "store-all".into()
}

/// Closed-loop controller demo.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlDemoConfig {
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_n_w")]
    pub n_w: usize,
    #[serde(default = "default_demo_seeds")]
    pub n_seeds: usize,
    #[serde(default = "default_pretrain_steps")]
    pub pretrain_steps: usize,
    #[serde(default = "default_pretrain_n_feat")]
    pub pretrain_n_feat: usize,
    #[serde(default = "default_g_samples")]
    pub g_samples: usize,
    /// "store-all", "relearn", or "reuse:<k>".
    #[serde(default = "default_storage")]
    pub storage: String,
}

impl Default for ControlDemoConfig {
    fn default() -> Self {
        Self {
            horizon: default_horizon(),
            n_w: default_n_w(),
            n_seeds: default_demo_seeds(),
            pretrain_steps: default_pretrain_steps(),
            pretrain_n_feat: default_pretrain_n_feat(),
            g_samples: default_g_samples(),
            storage: default_storage(),
        }
    }
}

impl ControlDemoConfig {
    pub fn storage_policy(&self) -> Result<crate::controller::StoragePolicy> {
        use crate::controller::StoragePolicy::*;
        match self.storage.as_str() {
            "store-all" => Ok(StoreAll),
            "relearn" => Ok(RelearnEachStep),
            s if s.starts_with("reuse:") => {
                let k: usize = s["reuse:".len()..]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad storage spec '{s}'")))?;
                Ok(ReuseSteps(k.max(1)))
            }
            other => Err(Error::Config(format!(
                "controller.storage must be store-all, relearn, or reuse:<k>; got '{other}'"
            ))),
        }
    }
}

fn default_blend() -> f64 {
    0.5
}
fn default_offset_factor() -> f64 {
    1e3
}
fn default_appendix_steps() -> usize {
    60
}
fn default_appendix_seeds() -> usize {
    20
}

/// Fixed-blending baseline decay experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppendixCConfig {
    /// Fixed blending `K = blend * H⁻¹`; `0 < blend < 2` keeps the posterior
    /// moving toward the measurement.
    #[serde(default = "default_blend")]
    pub blend: f64,
    /// Initial estimate offset as a multiple of the sensor-noise floor.
    #[serde(default = "default_offset_factor")]
    pub offset_factor: f64,
    #[serde(default = "default_appendix_steps")]
    pub steps: usize,
    #[serde(default = "default_appendix_seeds")]
    pub n_seeds: usize,
}

impl Default for AppendixCConfig {
    fn default() -> Self {
        Self {
            blend: default_blend(),
            offset_factor: default_offset_factor(),
            steps: default_appendix_steps(),
            n_seeds: default_appendix_seeds(),
        }
    }
}

fn default_seed() -> u64 {
    1
}
fn default_n_seeds() -> usize {
    10
}
fn default_out_dir() -> String {
    "out".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Seed-averaged quantities use seeds `seed, seed+1, ...`.
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            n_seeds: default_n_seeds(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: String,
    #[serde(default)]
    pub svg: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            svg: false,
        }
    }
}

/// Top-level configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub fig2: Fig2Config,
    #[serde(default)]
    pub control_demo: ControlDemoConfig,
    #[serde(default)]
    pub appendix_c: AppendixCConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.estimator.rep_method()?;
        self.control_demo.storage_policy()?;
        self.model.build()?;
        if self.run.n_seeds == 0 {
            return Err(Error::Config("run.n_seeds must be at least 1".into()));
        }
        if self.fig2.run2_gamma_z <= 0.0 || self.fig2.run2_gamma_z >= 1.0 {
            return Err(Error::Config(
                "fig2.run2_gamma_z must be in (0, 1)".into(),
            ));
        }
        if !(self.appendix_c.blend > 0.0) {
            return Err(Error::Config("appendix_c.blend must be positive".into()));
        }
        Ok(())
    }

    /// Non-fatal configuration concerns (rates outside a rule's comfort
    /// zone, rank deficiencies are reported elsewhere).
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.estimator.z_method == 2 {
            let per_feature = self.fig2.run3_gamma_z / self.fig2.run3_n_feat.max(1) as f64;
            for (label, rate) in [
                ("fig2.run2_gamma_z", self.fig2.run2_gamma_z),
                ("fig2.run3_gamma_z per feature", per_feature),
            ] {
                if rate > 0.05 {
                    w.push(format!(
                        "inverse-form covariance learning expects a small rate;                          {label} = {rate} exceeds 0.05"
                    ));
                }
            }
        }
        w
    }

    /// The effective configuration, serialized; writing this next to the
    /// results is enough to re-run the experiment identically.
    pub fn echo_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Seeds used for seed-averaged runs.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.run.n_seeds as u64)
            .map(|i| self.run.seed.wrapping_add(i))
            .collect()
    }
}
