//! Physics-informed temperature field reconstruction from sparse sensors,
//! with Monte Carlo quantile sampling for aleatoric uncertainty.
//!
//! The numerical kernels (geometry, solver, losses, metrics, uncertainty
//! reduction) live in [`tfr_core`]; this crate adds the network, training,
//! file formats and the `tfr` command line tool.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod model;
pub mod nn;
pub mod predict;
pub mod report;
pub mod train;

pub use error::{Error, Result};
pub use model::{FlipAxis, Model, ModelConfig, Surrogate};
