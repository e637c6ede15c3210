//! Continual-learning lab for keeping a synthetic-image detector current as
//! new generators appear, built around an ensemble of frozen expert
//! embedders fused by a small transformer.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod e3;
pub mod error;
pub mod metrics;
pub mod protocol;
pub mod report;
pub mod rng;
pub mod runner;
pub mod synthgen;
pub mod tensor;

pub use error::{E3Error, Result};

/// Evaluation source id that pools every baseline generator.
pub const BASELINE_SOURCE: &str = "baseline";
