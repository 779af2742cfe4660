//! Differentially private, parameter-efficient fine-tuning on a frozen
//! multi-task backbone.
//!
//! * [`model`]: frozen backbone, low-rank adapter subspace, exact per-sample gradients
//! * [`dp`]: per-sample clipping, Gaussian mechanism, per-task noise allocation
//! * [`accountant`]: Rényi DP ledger and (ε, δ) conversion
//! * [`objective`]: task loss, update regularizer, gradient-distribution KL
//! * [`dataio`]: synthetic multi-task data, label corruption, file formats
//! * [`harness`]: training loop, sweeps, robustness runs, reports
// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod dataio;
pub mod dp;
pub mod error;
pub mod harness;
pub mod model;
pub mod objective;
pub mod rng;

pub use error::{Error, Result};
