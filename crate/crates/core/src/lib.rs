//! Closed-loop simulation of UAV navigation under GPS spoofing.
//!
//! The crate wires together five subsystems around a double-integrator plant:
//!
//! - [`model`] — plant dynamics, the three sensor channels (GPS, relative/IMU,
//!   signal strength) and the spoofing-device model.
//! - [`estimator`] — a Kalman-like resilient state estimator that can drop the
//!   GPS channel and run on relative measurements alone, plus the GPS-denied
//!   covariance recursion used to predict drift.
//! - [`detector`] — chi-squared CUSUM detection of injected GPS offsets and the
//!   robust/emergency mode switch.
//! - [`tracker`] — attacker location tracker: an unscented Kalman filter over
//!   the augmented attacker state (position, transmit power) with sliding-window
//!   signal-strength outputs.
//! - [`escape`] — escape-time computation and the MPC-style escape controller
//!   (hard exit constraint with a probabilistic margin, or a repulsive-potential
//!   soft constraint), backed by a projected-gradient augmented-Lagrangian solver.
//!
//! [`sim`] runs full scenarios (seeded, reproducible), [`config`] parses the
//! TOML scenario schema and ships the built-in presets, and [`trace`] handles
//! CSV export of per-step records and events.

pub mod config;
pub mod detector;
#[cfg(test)]
pub(crate) mod fixtures;
pub mod escape;
pub mod estimator;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod tracker;
pub mod trace;

use thiserror::Error;

/// Crate-wide error type. Variants map to CLI exit-code categories.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions, invalid parameter values, bad config files.
    #[error("configuration error: {0}")]
    Config(String),
    /// Domain violations on operation inputs (nonpositive power, gamma out of range, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Evaluation closer to a singularity than the guard distance allows.
    #[error("singularity guard: {0}")]
    Singularity(String),
    /// Failed factorizations, non-finite values, ill-conditioned solves.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// File I/O, always with path context.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the CLI: one code per diagnostic category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Domain(_) => 3,
            Error::Singularity(_) => 4,
            Error::Numerical(_) => 5,
            Error::Io { .. } => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Guard distance below which squared-distance denominators are treated as
/// singular rather than evaluated.
pub const EPS_DIST: f64 = 1e-6;
