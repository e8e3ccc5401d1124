//! Experiment workbench: grid training, self-describing checkpoints,
//! per-module analysis commands and CSV/JSON/SVG reports.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod plot;

pub use error::{CliError, Result};
