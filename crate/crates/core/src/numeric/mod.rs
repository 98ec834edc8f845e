//! Deterministic numerical substrate: dense matrices, a seeded generator and
//! the scalar activations used throughout the model.

mod activation;
mod matrix;
mod rng;

pub use activation::{sigmoid, sigmoid_prime, silu, silu_prime, softmax_row};
pub(crate) use matrix::dot;
pub use matrix::Matrix;
pub use rng::{gaussian_init, Rng};
