//! Riemannian proximal policy optimization with Gaussian-mixture policies.
//!
//! The crate is layered bottom-up:
//!
//! - [`sym_linalg`]: dense symmetric/SPD kernels (eigendecomposition, square
//!   roots, inverses, eigenvalue-floor projection).
//! - [`gmm_model`]: joint (state, action) Gaussian mixtures stored as augmented
//!   SPD matrices plus softmax logits, with exact state conditioning.
//! - [`ot_distance`]: Gaussian W2, the mixture-embedded W2, the total-variation
//!   bound and an exact transportation simplex.
//! - [`riemannian_prox`]: a proximal gradient method over products of SPD
//!   matrices and vectors with descent monitoring.
//! - [`surrogate`]: the importance-weighted policy surrogate, proximity
//!   penalties, their gradients and the improvement-bound diagnostic.
//! - [`envs`], [`trainer`]: toy continuous-control tasks and the outer loop.

pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod error;
pub mod gmm_model;
pub mod oracle;
pub mod prox_suite;
pub mod ot_distance;
pub mod riemannian_prox;
pub mod selftest;
pub mod surrogate;
pub mod sym_linalg;
pub mod trainer;

pub use error::{Error, Result};
