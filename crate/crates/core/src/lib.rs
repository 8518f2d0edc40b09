//! Neural-network learning and execution of Kalman estimation, Kalman
//! control, and system identification, verified against the classical
//! recursions.
//!
//! The library works in measurement space: the plant state is never exposed
//! to the learners, only the stream of noisy measurement vectors. Layers:
//!
//! - [`lds`]: linear plant simulation with seeded per-stream Gaussian noise
//! - [`oracle`]: classical Kalman filter/controller and the exact
//!   measurement-space recursions they transform into
//! - [`estimator`] / [`controller`]: Hebbian ensemble learners for the
//!   filter, the controller, and the dynamics map
//! - [`experiment`]: reproducible experiment drivers (CSV output, seeded
//!   Monte-Carlo invariant checks) behind the CLI

pub mod controller;
pub mod covariance;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod lds;
pub mod linalg;
pub mod oracle;
pub mod rates;
pub mod rng;

pub use controller::{ControlSchedule, Controller, ControllerOptions, StoragePolicy};
pub use covariance::{CovarianceRep, RepMethod};
pub use error::{Error, Result};
pub use estimator::{EstimatorMode, EstimatorOptions, EstimatorState, SampleKind, SampleMethod};
pub use lds::{InitialState, LdsModel, PlantState, Trajectory};
pub use oracle::{KcSchedule, KfState, TransformedModel};
pub use rates::{AdaptiveRate, MurataParams};
pub use rng::RngStream;
