//! Sparse Gaussian-process regression by stochastic variational inference
//! over inducing variables, with a dense exact-GP oracle for baselines.
//!
//! The crate is organized around the training pipeline:
//! [`dataio`] loads or synthesizes datasets, [`inducing`] places the inducing
//! inputs by k-means, [`svgp`] holds the model state, bounds and
//! natural-gradient updates, [`trainer`] runs the stochastic optimization
//! loop, and [`exact`] provides the O(n³) dense baseline the sparse model is
//! judged against.

pub mod dataio;
pub mod error;
pub mod exact;
pub mod inducing;
pub mod kernels;
pub mod linalg;
pub mod svgp;
pub mod trainer;

pub use error::{Error, Result};
pub use kernels::{ard_relevances, KernelSpec, KernelTerm};
