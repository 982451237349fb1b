//! Command-line experiment runner for the gradient-leakage simulator.
//!
//! [`config`] parses experiment files, [`runner`] executes them and
//! [`report`] reads and writes the tabular outputs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod report;
pub mod runner;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use runner::{run_experiment, RunOutput};
