//! Pipeline driver: configuration, one function per stage, and report
//! formatting.

pub mod commands;
pub mod config;
pub mod format;

pub use commands::*;
pub use config::{MixedPrecision, PipelineConfig};
