//! Simulation engines for the open dynamics of `n` spin-1/2 emitters coupled
//! to a one-dimensional waveguide in the Markovian regime.
//!
//! The emitters interact through waveguide-mediated coherent exchange and
//! collective dissipation; the resulting Lindblad master equation is
//! integrated by four independent engines that share one model description:
//!
//! - [`ed`]: dense exact integration, plus a collective-spin ladder
//!   integrator for the permutation-symmetric (equal-phase) case,
//! - [`tn`]: a vectorized matrix-product-state engine with a fixed
//!   bond-dimension-10 first-order propagator,
//! - [`povm`]: exact evolution of the informationally complete Pauli-4
//!   outcome distribution,
//! - [`tnqs`]: a time-dependent autoregressive transformer ansatz for that
//!   same outcome distribution, trained against the distribution-space
//!   generator.
//!
//! [`analysis`] holds the engine-comparison harness (convergence metrics,
//! smoothing, peak extraction, cost models).

// The dense kernels walk several arrays under one index; iterator
// rewrites of those loops obscure the index arithmetic they share.
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod autodiff;
pub mod ed;
pub mod linalg;
pub mod model;
pub mod povm;
pub mod series;
pub mod tn;
pub mod tnqs;

/// Complex scalar used throughout the dense and tensor engines.
pub type C64 = num_complex::Complex64;

/// Crate version, stamped into run artifacts.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
