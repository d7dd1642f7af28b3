//! File formats, dataset IO and the `adaseg` command implementations.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod report;

pub use error::{CliError, Result};
