//! Numerical solver for forward-backward stochastic systems whose backward
//! generator is monotone (rather than Lipschitz) in `y`.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] declares finite-dimensional truncations of the state, noise and
//!   value spaces, the diagonal semigroup, the coefficients and the driver.
//! * [`validate`] falsifies the structural hypotheses on randomized samples.
//! * [`forward`] simulates the mild forward equation with exponential Euler.
//! * [`regression`] estimates conditional expectations by least squares.
//! * [`bsde`] and [`variational`] solve the backward equation and its
//!   linearization on a forward ensemble.
//! * [`kolmogorov`] evaluates the induced mild solution `u(t,x) = Y(t,t,x)`.
//! * [`control`] builds the Hamiltonian, synthesizes the optimal feedback and
//!   audits the fundamental relation.
//! * [`registry`] ships the built-in analytic models.

pub mod bsde;
pub mod control;
pub mod error;
pub mod forward;
pub mod grid;
pub mod kolmogorov;
pub mod model;
pub mod registry;
pub mod regression;
pub mod rng;
pub mod stats;
pub mod validate;
pub mod variational;

pub use error::{FbsdeError, Result};
