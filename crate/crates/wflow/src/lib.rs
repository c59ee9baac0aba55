//! Configuration, serialization, parallel orchestration and the command
//! implementations behind the `wflow` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod format;
pub mod manifest;
pub mod runner;

pub use error::{CliError, Result};
