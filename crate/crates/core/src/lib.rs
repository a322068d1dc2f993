//! Modelling, simulation and verification tools for tapering a dose while
//! keeping well-being above a floor.
//!
//! The dose response is an opponent process: a positive immediate effect
//! followed by a negative, slowly decaying rebound. [`models`] builds and
//! certifies such kernels, [`dynamics`] simulates closed loops, [`protocols`]
//! holds the dosing policies, [`oracles`] checks their guarantees on small or
//! randomized instances, and [`experiments`] runs population sweeps.

pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod models;
pub mod oracles;
pub mod protocols;

pub use error::{Error, Result};
