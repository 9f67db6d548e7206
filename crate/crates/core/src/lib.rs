//! Spectral deconfounding, doubly debiased Lasso inference and anchor
//! regression (causal regularization), together with structural-equation-model
//! generators whose analytic population oracles back the test suite.
//!
//! The operational core is deliberately simple: linearly pre-transform the
//! data (Trim / PCA / Lava on the singular values of `X`, or `W_gamma` built
//! from anchor variables) and run ordinary or `l1`-penalized least squares on
//! the transformed quantities.

pub mod anchor;
pub mod cli;
pub mod data;
pub mod deconfound;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod metrics;
pub mod seeding;
pub mod sem;
pub mod sparse;
pub mod spectral;

#[doc(hidden)]
pub mod testutil;

pub use error::{Error, Result};
