//! Command-line front end for dynamical low-rank training on MNIST.
//!
//! - [`config`]: TOML run configuration and command-line overrides.
//! - [`train`]: data splits, evaluation and the epoch loop.
//! - [`commands`]: `evaluate`, `prune-retrain` and `benchmark`.
//! - [`checkpoint`]: manifest plus checksummed little-endian tensor blobs.
//! - [`logs`]: `metrics.csv`, `ranks.csv` and `timings.csv`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod logs;
pub mod train;

mod error;

pub use error::{CliError, Result};
