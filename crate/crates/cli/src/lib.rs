//! Command-line front end: scene generation, training, evaluation, rollout,
//! gradient checking and benchmarking.

mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod forecaster;
pub mod output;

pub use cli::run;
pub use config::{Preset, RunConfig};
pub use error::CliError;
