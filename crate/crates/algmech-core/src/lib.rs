//! Mechanics and optimal control on Lie algebroids.
//!
//! The crate is organized around a chart description of an algebroid (base
//! coordinates, fiber basis, anchor, structure functions) and builds up:
//!
//! - [`calculus`]: expression parsing and exact forward-mode derivatives;
//! - [`algebroid`]: chart constructors and structural validation;
//! - [`mechanics`]: first-order Lagrangian and Hamiltonian dynamics;
//! - [`sorusk`]: second-order variational problems, the presymplectic
//!   constraint algorithm, constrained and reduced formulations;
//! - [`ocp`]: optimal control problems rephrased as second-order problems;
//! - [`solve`]: integrators, dense output, shooting, and file output.

pub mod algebroid;
pub mod calculus;
pub mod error;
pub mod linalg;
pub mod mechanics;
pub mod ocp;
pub mod solve;
pub mod sorusk;

pub use error::{Error, Result};
