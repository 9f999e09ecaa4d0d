//! Sensorless vision-state force estimation toolkit.

pub mod augment;
pub mod calibration;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod kinematics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
