//! Straight-and-level flight tutor.
//!
//! A scripted expert flies a simplified fixed-wing model, a behavioral-cloning
//! policy learns its yoke commands, and a tutor runs that policy in shadow
//! mode next to a student, flagging pitch and roll disagreements.

pub mod bc;
pub mod dataset;
mod error;
pub mod eval;
pub mod expert;
pub mod flightdyn;
pub mod seeds;
pub mod session;
pub mod tutor;

pub use error::{Error, Result};
