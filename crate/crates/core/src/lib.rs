//! Scenario-adaptive mixture-of-experts two-tower retrieval.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense tensors and a reverse-mode tape
//! - [`features`]: schemas, embedding tables and input assembly
//! - [`sap`]: the scenario-adaptive projection layer
//! - [`moe`]: experts, per-scenario batch normalization, gating and mixture
//! - [`model`]: the two-tower student, the joint-feature teacher, checkpoints
//! - [`training`]: losses, negative sampling, Adam and the two-phase loop
//! - [`eval`]: exact top-K retrieval, Recall@K, sweeps and analyses
//! - [`data`]: synthetic generation, CSV I/O and experiment configuration

pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod sap;
pub mod training;

pub use error::{Error, Result};
