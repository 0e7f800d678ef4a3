//! Deep additive kernel models.
//!
//! A neural feature extractor maps inputs to `P` scalar features, each of
//! which feeds a one-dimensional Laplace-kernel GP. Every GP is replaced by
//! its interpolant on a fixed sorted dyadic grid, which turns the additive
//! GP head into a Bayesian linear layer with independent Gaussian weights.
//! The sparse inverse Cholesky factor of the grid Gram matrix makes the
//! kernel activation `O(M)` per feature.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod grid;
pub mod head;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod train;
pub mod vi;

pub use autodiff::{Tape, Tensor, Var};
pub use grid::{inverse_chol_factor, sorted_dyadic, Domain, DyadicGrid, SparseUpperFactor};
pub use head::{DakHead, InducedBasis, Squash, VariationalGaussian};
pub use kernels::LaplaceKernel;
