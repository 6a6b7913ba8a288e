//! Evidential uncertainty losses for Dirichlet-output classifiers.

pub mod dirichlet;
pub mod error;
pub mod gradients;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod rng;
pub mod specfn;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
