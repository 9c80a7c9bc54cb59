//! File formats: PNG images, binary checkpoints, and the run configuration.

pub mod checkpoint;
pub mod config;
pub mod png;
