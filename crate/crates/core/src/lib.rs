//! Age-and-size structured branching processes.
//!
//! Flows, first-jump renewal kernels, the Malthus exponent as the root of a
//! truncated principal eigenvalue problem, exact Monte Carlo simulation of
//! the population, and stationary-profile diagnostics for the adder model.

pub mod eigen;
pub mod error;
pub mod flow;
pub mod model;
pub mod quadrature;
pub mod renewal;
pub mod simulate;
pub mod stationary;

pub use error::{Error, Result};
pub use model::{make_adder, Fragmentation, Hazard, ModelSpec, PhasePoint};
