//! Online convex optimization composed with reference governors for constrained
//! nonlinear setpoint tracking.

pub mod cli;
pub mod config;
pub mod error;
pub mod governor;
pub mod harness;
pub mod oco;
pub mod plant;
pub mod safeset;
pub mod tracking;

pub use error::{Error, Result};
