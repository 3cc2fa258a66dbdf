//! Reproducible simulate / reconstruct / benchmark pipeline around
//! `twinbeam-core`.
//!
//! Every command is a pure function of its [`RunConfig`]; reports carry the
//! seed and a hash of the effective configuration.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod report;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
