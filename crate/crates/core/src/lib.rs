//! Multi-task CTR modelling lab.
//!
//! A modality-grouped multi-gate mixture-of-experts click model with
//! deep-cross experts and per-modality loss masking, plus everything needed
//! to exercise it: a synthetic impression generator, training loop,
//! temperature calibration, AUC-PR / ECE evaluation, Pareto analysis, a
//! second-price auction simulator and an ablation runner.

// `!(x > 0.0)` also rejects NaN, which `x <= 0.0` would let through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod auction;
pub mod calibration;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod tensorcore;

pub use error::{Error, Result};
