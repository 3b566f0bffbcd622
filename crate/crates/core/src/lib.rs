//! Exponential control barrier functions, their zero dynamics, and the
//! closed-loop scenarios used to study minimum-phase behaviour.

pub mod cbf_core;
pub mod cli;
pub mod error;
pub mod filters;
pub mod internal_analysis;
pub mod numerics;
pub mod scenarios;
pub mod simulation;
pub mod verify;

pub use error::{Error, Result};
