//! Solvers for diagonal-coupled (nonlocal) parabolic PDEs on the triangular
//! time domain `{0 <= s <= t <= T}`, where the right-hand side may depend on
//! the unknown and its derivatives both at the local point `(t, s, y)` and on
//! the diagonal `(s, s, y)`.
//!
//! The stack, bottom to top:
//!
//! - [`grid`]: triangular space-time grids, field storage, quadrature;
//! - [`norms`]: discrete parabolic Hölder norms used as solver monitors;
//! - [`stepper`]: the classical (local) linear parabolic theta-scheme;
//! - [`linear`]: the coupled `(u, u_t)` fixed-point solver for linear
//!   equations with diagonal terms, plus Schauder-ratio and stability probes;
//! - [`nonlinear`]: fully nonlinear equations via anchored linearization;
//! - [`hjb`]: equilibrium HJB front-end for time-inconsistent control;
//! - [`fbsde`]: Monte Carlo verification of the stochastic representation;
//! - [`expr`] / [`manufacture`]: expression grammar and exact manufactured
//!   sources;
//! - [`config`] / [`pipeline`]: batch configuration and run orchestration.

pub mod config;
pub mod error;
pub mod expr;
pub mod fbsde;
pub mod grid;
pub mod hjb;
pub mod linear;
pub mod manufacture;
pub mod nonlinear;
pub mod norms;
pub mod pipeline;
pub mod stepper;

pub use error::{Error, Result};
