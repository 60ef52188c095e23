//! Pricing engine for European-style equity, FX, and interest-rate derivatives
//! when the underlying economy follows a Markov-switching VAR(p) process.
//!
//! The library is organized around a small pipeline:
//!
//! 1. [`model`] defines the regime-switching VAR process, its covariance
//!    dynamics, and real-measure simulation.
//! 2. [`girsanov`] computes the change-of-measure kernels (relative-entropy and
//!    state-price-density-variance minimizers) and their linear representations.
//! 3. [`stacked`] assembles the block-triangular system of a fixed regime path
//!    and exposes every conditional Gaussian law of the risk-neutral dynamics.
//! 4. [`mixture`] mixes over regime paths (enumerated weights, filtered
//!    weights, and Rao-Blackwellized averaging over parameter draws).
//! 5. [`normal`], [`lognormal`], and [`term`] hold the closed-form pricers for
//!    the three market systems.
//! 6. [`oracle`] provides independent ground truth: risk-neutral Monte Carlo
//!    and Gaussian quadrature.

pub mod error;
pub mod girsanov;
pub mod linalg;
pub mod lognormal;
pub mod mixture;
pub mod model;
pub mod normal;
pub mod oracle;
pub mod stacked;
pub mod term;

pub use error::PricingError;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, PricingError>;
