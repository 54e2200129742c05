//! Two-sample tests for spiked covariance models.
//!
//! The crate simulates spiked data, estimates spike strengths and directions
//! with bias corrections from random matrix theory, compares two populations
//! with five test statistics, runs Monte Carlo power studies and checks the
//! asymptotic invariance properties of the estimators numerically.

pub mod calibration;
pub mod config;
pub mod datagen;
pub mod error;
pub mod estimators;
pub mod io;
pub mod lab;
pub mod power;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod twosample;

pub use error::{Error, Result};
