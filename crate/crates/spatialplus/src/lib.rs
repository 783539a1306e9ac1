//! Partial thin plate spline regression with estimators that stay reliable
//! under spatial confounding.
//!
//! The crate builds thin plate spline bases and penalties from scattered
//! locations ([`basis`]), holds smoothers in a reusable spectral form
//! ([`smoothing`]), and fits the competing covariate-effect estimators --
//! null, spatial, RSR, gSEM, spatial+ and partial-residual -- for Gaussian
//! responses ([`estimators`]) and exponential-family responses ([`glm`]).
//! A Gaussian-random-field simulation harness ([`fields`]), an end-to-end
//! experiment runner ([`experiments`]) and empirical rate checks for the
//! asymptotic theory ([`asymptotics`]) sit on top.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod asymptotics;
pub mod basis;
pub mod estimators;
pub mod experiments;
pub mod fields;
pub mod glm;
pub mod error;
pub mod smoothing;

pub use error::{Error, Result};
