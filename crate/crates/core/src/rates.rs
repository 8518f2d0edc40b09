//! Adaptive learning-rate control.
//!
//! Implements the Murata-Mueller-Ziehe-Amari style rule with four control
//! parameters `{alpha, beta, gamma, delta}`:
//!
//! ```text
//! r    <- (1 - delta) r + delta * flow          (leaky average of the update flow)
//! rate <- rate + alpha * rate * (beta ||r|| - gamma * rate)
//! ```
//!
//! The flow is the raw per-step update direction (a gradient or a
//! covariance residual, flattened). A persistent flow inflates the rate up
//! to `cap`; once the flow averages out, the rate anneals toward `floor`.

use nalgebra::{DMatrix, DVector};

/// The four control parameters plus rate bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MurataParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub floor: f64,
    pub cap: f64,
}

impl MurataParams {
    /// Default control set for covariance (`Z`) learning. The cap keeps a
    /// single-sample update from replacing the whole moment (a rate of one
    /// would make the learned covariance rank-one).
    pub fn covariance_default() -> Self {
        Self {
            alpha: 0.5,
            beta: 30.0,
            gamma: 0.05,
            delta: 0.1,
            floor: 1e-6,
            cap: 0.5,
        }
    }

    /// Default control set for dynamics (`F̃`) learning. The cap keeps
    /// `rate * ||y||^2` inside the stability region of the regression step.
    pub fn dynamics_default() -> Self {
        Self {
            alpha: 0.1,
            beta: 3.0,
            gamma: 0.05,
            delta: 0.04,
            floor: 1e-6,
            cap: 0.15,
        }
    }
}

/// Adaptive rate state: the leaky flow average and the current rate.
#[derive(Debug, Clone)]
pub struct AdaptiveRate {
    params: MurataParams,
    flow_avg: DVector<f64>,
    rate: f64,
}

impl AdaptiveRate {
    pub fn new(params: MurataParams, flow_dim: usize, initial_rate: f64) -> Self {
        Self {
            params,
            flow_avg: DVector::zeros(flow_dim),
            rate: initial_rate.clamp(params.floor, params.cap),
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Fold one flow observation into the average and adapt the rate.
    /// Returns the new rate.
    pub fn observe(&mut self, flow: &DVector<f64>) -> f64 {
        let p = &self.params;
        self.flow_avg = &self.flow_avg * (1.0 - p.delta) + flow * p.delta;
        let drive = p.beta * self.flow_avg.norm() - p.gamma * self.rate;
        self.rate = (self.rate + p.alpha * self.rate * drive).clamp(p.floor, p.cap);
        self.rate
    }

    /// Convenience wrapper for matrix-valued flows (flattened column-major).
    pub fn observe_matrix(&mut self, flow: &DMatrix<f64>) -> f64 {
        let v = DVector::from_column_slice(flow.as_slice());
        self.observe(&v)
    }
}
