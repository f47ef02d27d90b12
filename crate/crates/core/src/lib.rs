//! Simulation and forecasting of a driven two-level atom.
//!
//! The library has two halves. The physics half propagates the Schrodinger
//! equation for a two-level atom in a time-dependent electric field with a
//! norm-preserving splitting scheme and exposes the dipole expectation value
//! that drives everything downstream. The learning half trains a conditional
//! sequence-to-sequence LSTM that consumes a short dipole history plus the
//! field, and autoregressively forecasts the dipole far beyond the seed
//! window. Everything random is seeded and every pipeline stage is
//! bit-reproducible, independent of thread count.

pub mod container;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod fields;
pub mod model;
pub mod physics;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
