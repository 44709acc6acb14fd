//! Bayesian identification of Wiener models.
//!
//! A Wiener model is a known linear (possibly time-varying) state-space system
//! whose state is observed through an unknown static nonlinearity
//! `h(x) = Σ θ_n φ_n(x)`, expanded in a Fourier basis. This crate computes the
//! optimal affine MMSE estimator of `θ`, its analytic error, and input
//! trajectories that minimize that error.
//!
//! Module map:
//!
//! - [`lifted`]: state-trajectory statistics (means, covariances, cross-covariances).
//! - [`dbs`]: mean and cross-covariance of the basis along the trajectory (`Φ̄`, `M`).
//! - [`estimators`]: Bayesian affine estimator, posterior update, DLS/MLS ridge baselines.
//! - [`active`]: analytic error gradient and projected adaptive gradient descent.
//! - [`multitraj`]: stacking of independent trajectories and consistency diagnostics.
//! - [`sim`]: seeded simulation and Monte Carlo harness with common random numbers.
//! - [`experiment`]: JSON-configured benchmark runner and result emission.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod active;
pub mod consts;
pub mod dbs;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod lifted;
pub mod linalg;
pub mod model;
pub mod multitraj;
pub mod sim;

pub use error::{Error, Result};
pub use model::WienerModel;
