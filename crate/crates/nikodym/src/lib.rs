//! Numerical laboratory for geodesic tube averaging on perturbed cometrics.
//!
//! The crate builds cometric models in a normal form adapted to a totally
//! geodesic submanifold, integrates the Hamiltonian geodesic flow and its
//! variational (linearized) equations, estimates Nikodym-type maximal
//! functions by tube averaging with a direction search, and measures scaling
//! exponents of maximal-to-source norm ratios as the tube radius shrinks.
//!
//! Everything lives on a single chart cube `U = (-delta0, delta0)^dim` and is
//! deterministic: fixed-step RK4, fixed low-discrepancy sample patterns, and
//! fixed reduction orders, so artifacts reproduce byte-for-byte across runs
//! and worker counts (timing fields excepted).

pub mod artifacts;
pub mod config;
pub mod error;
pub mod flow;
pub mod linalg;
pub mod maximal;
pub mod metric;
pub mod scaling;
pub mod variational;

pub use error::{Error, Result};
