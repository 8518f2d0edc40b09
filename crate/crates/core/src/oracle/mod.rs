//! Ground-truth recursions: the classical Kalman filter/controller and their
//! exact measurement-space counterparts.

pub mod classical;
pub mod transformed;

pub use classical::{evaluate_cost, kc_backward, kf_execute_step, kf_learn_step, KcSchedule, KfState};
pub use transformed::{
    control_gain_from_t, derive_transformed, gain_from_z, t_step, z_step, TransformedModel,
};
