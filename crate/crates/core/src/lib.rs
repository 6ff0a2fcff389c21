//! Numerical laboratory for type-II blow-up of the heat equation on the
//! half-space with nonlinear boundary flux `du/dnu = u^q`.

pub mod angular;
pub mod cli;
pub mod banded;
pub mod error;
pub mod fv;
pub mod ode;
pub mod quad;
pub mod simulator;
pub mod specfun;
pub mod stationary;
pub mod spectral;
pub mod weighted_heat;

pub use error::{Error, Result};
