//! Standard-library companion of `mabsa-core`: corpus and resource files,
//! checkpoints, run configuration, training history, the experiment harness
//! and the `mabsa` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod harness;
pub mod history;
pub mod io;
pub mod pipeline;

pub use error::{AppError, Result};
pub use mabsa_core as core;
