//! Config-driven driver for the elliptic and semigroup studies.

pub mod config;
pub mod output;
pub mod runner;

pub use config::{ExperimentConfig, StudyKind};
pub use runner::{run, Outcome, RunOptions, Status};
