//! Effective dynamics for reversible diffusions along nonlinear, vector-valued
//! reaction coordinates.
//!
//! The crate builds the coarse-grained SDE obtained by conditional expectation
//! of the projected drift and diffusion, co-simulates it against the full
//! dynamics with coupled Brownian increments, and evaluates the closed-form
//! pathwise error bounds that control the discrepancy.
//!
//! Module map:
//! - [`model`]: the full diffusion system and its generator.
//! - [`geometry`]: level-set linear algebra (Φ, its SPD root, the skew projector Π)
//!   and the integrability obstruction for a complementary coordinate.
//! - [`sampler`]: Euler–Maruyama integrators for the full and the fiber dynamics.
//! - [`effective`]: estimators for the effective coefficients and the constants
//!   entering the error bounds.
//! - [`coupled`]: coupled co-simulation and pathwise error statistics.
//! - [`bounds`]: the bound evaluators, the Gronwall-type comparison and power-law fits.
//! - [`cli`]: experiment configuration, case studies and the run pipeline.

pub mod bounds;
pub mod cli;
pub mod coupled;
pub mod effective;
pub mod error;
pub mod geometry;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod sampler;
pub mod stats;
pub mod systems;

pub use error::{Error, Result};
