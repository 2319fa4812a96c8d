//! Gradient-based epistemic uncertainty for anchor-based object detectors.
//!
//! The crate decodes raw detector head outputs, computes per-box masked
//! loss gradients through a small convolutional head by manual
//! backpropagation, collapses them into scalar uncertainty features,
//! learns gradient-boosted meta classifiers/regressors from those
//! features, evaluates calibration, and runs a decision pipeline that
//! thresholds on meta-classifier probability instead of the raw score.
//! An instrumented FLOP ledger certifies the cost model of every phase.
//!
//! Start with the `examples/` directory: each example is a runnable tour
//! of one capability (geometry, gradient features, MC dropout, meta
//! models, calibration, decision fusion, cost certification).

pub mod calibration;
pub mod certify;
pub mod conv;
pub mod cv;
pub mod detection;
pub mod dropout;
pub mod error;
pub mod features;
pub mod flops;
pub mod gbt;
pub mod heads;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod synth;

pub mod commands;

pub use error::{Error, Result};
