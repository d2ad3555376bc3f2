//! Stochastic bilevel optimization with `y*`-aware oracles.
//!
//! The crate is organized bottom-up:
//!
//! - [`kernels`]: scalar functions and progress measures behind the chain
//!   hard instance.
//! - [`problems`]: bilevel problem instances (analytic quadratic family,
//!   cubic-perturbed family, chain hard instance, randomized embedding).
//! - [`oracles`]: stochastic first-order oracles that also return an estimate
//!   of the lower-level solution and are only reliable near it.
//! - [`solver`]: the penalty method with coupled lower-level iterates.
//! - [`analysis`]: ground-truth measurement, lemma certification, stall and
//!   rate experiments.

pub mod analysis;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod oracles;
pub mod problems;
pub mod quadrature;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
