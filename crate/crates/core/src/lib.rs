//! Benchmark engine for short-horizon pedestrian trajectory forecasting.
//!
//! The crate generates interaction-centric synthetic crowd scenes with an
//! ORCA simulator, tags scenes by interaction type, runs classical
//! forecasters and scores their output.

pub mod dataset;
pub mod categorize;
pub mod error;
pub mod forecast;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod orca;
pub mod pooling;
pub mod social_force;
pub mod synth;

pub use error::{Error, Result};
