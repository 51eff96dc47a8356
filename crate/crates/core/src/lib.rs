//! Movable-antenna channel map toolkit.
//!
//! Synthesizes 3-D small-scale channel maps from a far-field multipath
//! field-response model, reconstructs full maps from α-strided sparse
//! measurements with a residual 3-D CNN, and benchmarks against trilinear
//! interpolation.

pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod par;
pub mod protocol;
pub mod rng;
pub mod sim;
pub mod trainer;

pub use error::{Error, Result};
