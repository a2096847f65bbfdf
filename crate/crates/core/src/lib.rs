//! Mean-field stochastic partial differential equations realized in a
//! finite-dimensional Gelfand triple.
//!
//! The crate is organized bottom-up:
//!
//! * [`triple`] holds the discrete triple `V ⊂ H ⊂ V*`, the time grid and the
//!   principal operator process together with coercivity/boundedness checks.
//! * [`coeffs`] defines coefficient models (mean-field drift and diffusion,
//!   backward drivers, controlled coefficients, linear-quadratic matrices)
//!   and sampled validators for their standing assumptions.
//! * [`forward`] is the interacting-particle semi-implicit Euler–Maruyama
//!   solver for the forward equation.
//! * [`backward`] solves mean-field backward equations with least-squares
//!   regression and Picard iteration, and the linear adjoint equation of the
//!   control problem.
//! * [`control`] contains the Hamiltonian, cost, variational gradient,
//!   projected-gradient optimizer and maximum-principle certificates.
//! * [`lq`] specializes everything to the linear-quadratic problem and
//!   solves the stochastic Hamiltonian system by damped fixed-point iteration.
//! * [`cauchy`] discretizes the divergence-form Cauchy problem into an
//!   [`lq::LqProblem`].
//! * [`estimates`] measures a priori and continuous-dependence estimates by
//!   perturbation scaling.
//!
//! Particle loops run on rayon when the `parallel` feature is enabled (the
//! default). Results never depend on the number of worker threads: random
//! increments come from per-particle substreams and every ensemble reduction
//! uses a fixed pairwise summation order.

// `!(x > 0.0)` is used on purpose so that NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backward;
pub mod cauchy;
pub mod coeffs;
pub mod control;
mod error;
pub mod estimates;
pub mod exec;
pub mod export;
pub mod forward;
pub mod linalg;
pub mod lq;
pub mod regression;
pub mod triple;

pub use error::{Error, Result};

pub use nalgebra::{DMatrix, DVector};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
