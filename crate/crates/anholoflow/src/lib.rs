//! Numerical toolkit for metric flows on nonholonomic 2+2 charts.
//!
//! The crate is organized around a four-axis grid chart (`grid`) carrying
//! distinguished metrics `g_ij` (horizontal), `h_ab` (vertical) and a
//! nonlinear-connection field `N_i^a` that tilts the horizontal frame
//! (`geometry`).  On top of that sit:
//!
//! * `ansatz`    — off-diagonal exact-solution families built from a
//!                 generating function and their defining-system residuals,
//! * `flow`      — parameter evolution of the metric blocks plus the
//!                 conjugate-density evolution of the weight `exp(-f)`,
//! * `functionals` — energy/entropy functionals, their variations and
//!                 thermodynamic quantities,
//! * `spde`      — monotone-graph stochastic diffusion with spectral noise
//!                 on 1-/2-/3-d spatial domains,
//! * `cli` support — config schema, run manifests, field/CSV serialization.

pub mod ansatz;
pub mod config;
pub mod error;
pub mod expr;
pub mod flow;
pub mod functionals;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod manifest;
pub mod runner;
pub mod spde;

pub use error::Error;

/// Crate version string recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
