//! The `icu` operator binary: long-running processes, batch jobs, fleet
//! simulations and the acceptance suite.

pub mod acceptance;
pub mod commands;
pub mod harness;
pub mod manifest;

pub use commands::{execute, Cli, CliError};
