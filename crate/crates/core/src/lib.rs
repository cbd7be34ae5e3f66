//! Teacher-student-exam self-training for pixel-wise height regression,
//! with hierarchical bi-cut discretization, ordinal classification,
//! Plackett-Luce confidence calibration, and ranking-based pseudo-label
//! filtering, on synthetic long-tailed height scenes.

pub mod adam;
pub mod bins;
pub mod error;
pub mod gradcheck;
pub mod filter;
pub mod loss;
pub mod net;
pub mod checkpoint;
pub mod manifest;
pub mod metrics;
pub mod raster;
pub mod scene;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
