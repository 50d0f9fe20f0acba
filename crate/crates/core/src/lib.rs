//! KalmanNet-style state estimation.
//!
//! A Kalman filter whose gain is produced by a small recurrent network,
//! together with the exact model-based baselines it is measured against.
//!
//! The crate is organised by stage of the pipeline:
//!
//! - [`ssm`]: linear-Gaussian and Lorenz state-space models, seeded trajectory
//!   generation and the binary dataset container.
//! - [`filters`]: exact Kalman filter and extended Kalman filter.
//! - [`nn`]: the gain network parameters, a reverse-mode tape, GRU/affine
//!   layers, the Adam optimizer and the text checkpoint format.
//! - [`knet`]: the learned-gain filter. It only ever sees `F` and `H`.
//! - [`training`]: supervised and innovation (label-free) losses, offline
//!   mini-batch training and windowed online adaptation.
//! - [`harness`]: experiment configs, metrics, CSV emission and the experiment
//!   drivers used by the `knet` binary and the runnable examples.

pub mod error;
pub mod filters;
pub mod harness;
pub mod knet;
pub mod nn;
pub mod ssm;
pub mod training;

pub use error::{Error, Result};

/// `10·log10(x)`.
pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Inverse of [`to_db`].
pub fn from_db(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}
