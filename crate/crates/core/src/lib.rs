//! Numerical kernels for reconstructing steady-state temperature fields from
//! sparse sensor readings and quantifying the aleatoric uncertainty of the
//! reconstruction.
//!
//! Everything here is `no_std` (with `alloc`): geometry and masks, a
//! finite-difference heat solver used as ground truth, sensor and quantile
//! images, the physics-informed loss terms with their gradients, the Monte
//! Carlo mean/deviation reduction, and the accuracy metrics. The neural
//! surrogate, training loop, file formats and CLI live in the `tfr` crate.
#![no_std]

extern crate alloc;

pub mod error;
pub mod geometry;
pub mod grid;
pub mod images;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod solver;
pub mod uq;

pub use error::{Error, Result};
pub use geometry::{build_masks, DomainSpec, HeatSource, RegionMasks, SensorLayout, Shape};
pub use grid::{FieldGrid, Mask};
pub use images::{MpImage, NoiseKind, NoiseSpec, QuantileImage};
pub use losses::{LaplaceUnits, LossBreakdown, LossContext, LossWeights};
pub use metrics::{MetricsRecord, R2Mode};
pub use solver::SourceIntensityMap;
pub use uq::{PredictionResult, QuantileSurrogate, UqReport};
