//! Myocardial point tracking on echo-like cine sequences.
//!
//! The crate builds the whole pipeline from scratch: a small tape-based
//! autodiff tensor library, a temporally-aware convolutional backbone, local
//! 4D correlation tokens, an iterative joint temporal refiner, a synthetic
//! phantom data source with analytic ground truth, a training loop, and the
//! tracking / clinical metric kit (delta accuracy, MTE, AIT, GLS, agreement
//! and test-retest statistics).
//!
//! Kernels parallelize with rayon when the default `parallel` feature is on;
//! results are bit-identical to the sequential fallback because parallelism
//! only ever splits disjoint output slices.

pub mod backbone;
pub mod config;
pub mod container;
pub mod correlation;
pub mod error;
pub mod evalkit;
pub mod exec;
pub mod model;
pub mod params;
pub mod phantom;
pub mod refiner;
pub mod tensor;
pub mod training;
pub mod trajectory;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
