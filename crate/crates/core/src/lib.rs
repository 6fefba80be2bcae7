//! Desk-scale laboratory for path-exclusion (PX) foresight pruning.
//!
//! The crate builds small prunable ReLU networks, scores their parameters
//! with PX and the usual pruning-at-initialization baselines, computes the
//! exact empirical neural tangent kernel, and certifies the fast g/h
//! forward-pass computations against brute-force path enumeration.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod ntk;
pub mod paths;
pub mod pruning;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{LayerSpec, Network};
pub use tensor::{Rng, Tensor};
