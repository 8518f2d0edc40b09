//! Experiment drivers: reproducible runs, CSV records, and the seeded
//! Monte-Carlo invariant suites behind the CLI.

pub mod appendix_c;
pub mod checks;
pub mod config;
pub mod control_demo;
pub mod fig2;
pub mod output;

pub use config::ExperimentConfig;
