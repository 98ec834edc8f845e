//! Convert a dense SwiGLU transformer into a dynamically sparse mixture of
//! experts, train it with a thresholded sigmoid gate, a straight-through
//! estimator and an L1 sparsity penalty, and measure the result.

#[cfg(feature = "cli")]
pub mod cli;
pub mod dense;
mod error;
pub mod eval;
pub mod io;
pub mod moe;
pub mod numeric;
pub mod train;

pub use dense::{DenseFfn, Model, ModelConfig};
pub use error::{Error, Result};
pub use moe::{DsmoeLayer, GateDecision, GateSource, Routing};
pub use numeric::{Matrix, Rng};
