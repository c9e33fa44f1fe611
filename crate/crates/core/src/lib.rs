//! Run-time calibration of object-relation priors for detectors.
//!
//! Priors are [`edge::EdgeMatrix`] values of conditional class probabilities. The
//! [`califormer`] encoder turns a prior into per-class calibration vectors; [`selfcal`]
//! re-estimates a prior from a detector's own predictions; [`eval`] measures AP under
//! injected priors; [`simworld`] provides a seeded synthetic world to run it all on.

pub mod califormer;
pub mod detector;
pub mod edge;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod scalar;
pub mod seed;
pub mod selfcal;
pub mod simworld;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

/// Double precision prior.
pub type Edge = edge::EdgeMatrix<f64>;
/// Single precision prior.
pub type Edge32 = edge::EdgeMatrix<f32>;
pub type Delta = edge::DeltaEdge<f64>;
/// Double precision calibration model.
pub type Model = califormer::CaliDet<f64>;
pub type Model32 = califormer::CaliDet<f32>;
