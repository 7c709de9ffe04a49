//! Experiment driver for semigeostrophic flows in dual variables.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod measures;
pub mod output;
pub mod report;

pub use commands::Invocation;
pub use config::ExperimentConfig;
pub use error::{CliError, Result};
