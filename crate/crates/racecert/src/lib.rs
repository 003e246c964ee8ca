//! Experiment harness and file formats around `racecert-core`.

pub mod experiments;
pub mod fixtures;
pub mod io;
pub mod stats;
