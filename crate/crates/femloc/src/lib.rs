//! File formats, experiment configuration, parallel client execution and
//! the command pipeline built on `femloc-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod records;
pub mod report;

pub use error::{AppError, Result};
