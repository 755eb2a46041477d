//! Experiment harness around `gppsrl`: TOML configs, CSV/JSON outputs and
//! the `run`, `sweep-horizon`, `infogain` and `verify` commands.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{execute, Command, Failure, Invocation};
pub use config::ExperimentConfig;
