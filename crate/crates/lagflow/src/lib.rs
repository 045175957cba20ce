//! Lagrangian particle schemes for the continuity equation on the flat torus.
//!
//! The crate implements an explicit Euler approximation of the regular
//! Lagrangian flow of a Sobolev velocity field, two derived approximation
//! schemes for the continuity equation (a singular probabilistic scheme that
//! advects weighted Dirac atoms from randomly sampled cell representatives,
//! and a diffuse deterministic scheme that translates per-cell densities
//! rigidly), exact and entropic Wasserstein distances for error measurement,
//! and a Monte Carlo experiment harness with dyadic sweeps and rate fitting.
//!
//! Module map:
//! - [`torus`] — flat-torus points, displacements, geodesic distance;
//! - [`fields`] — velocity-field catalog, mollification, time averaging;
//! - [`mesh`] — torus partitions (cartesian / jittered / voronoi), cell
//!   masses, representative sampling;
//! - [`flow`] — the Euler flow, the mean (cell-averaged) Euler flow, a
//!   4th-order reference integrator, and flow diagnostics;
//! - [`transport`] — discrete measures, exact 1-Wasserstein via min-cost
//!   flow, entropic fallback, splitting bound, dual-gap check;
//! - [`solver`] — the two schemes, reference solutions, error curves, Monte
//!   Carlo summaries;
//! - [`experiment`] — experiment configs, dyadic sweeps, rate fits, plot
//!   data; drives the `lagflow` binary.

// Validations are written `!(x > 0.0)` so that NaN fails them; routing the
// comparison through `partial_cmp` would obscure that policy.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod fields;
pub mod flow;
pub mod mesh;
pub mod qmc;
pub mod quad;
pub mod solver;
pub mod torus;
pub mod transport;

pub use error::{Error, Result};

/// Crate version string recorded in experiment summaries.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
