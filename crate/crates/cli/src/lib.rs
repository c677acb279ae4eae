//! Command-line front end for the `vmemsec` library.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod pipeline;

pub use commands::{execute, Cli};
pub use config::{ModelChoice, RunConfig};
pub use pipeline::{run_pipeline, RunReport};
