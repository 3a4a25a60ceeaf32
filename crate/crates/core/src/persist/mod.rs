//! Checkpoints and run configuration.

pub mod checkpoint;
pub mod config;
