//! MIMO detection workbench: OAMP and its deep-unfolded variant OAMP-Net2,
//! LMMSE channel estimation with error-covariance propagation, a turbo
//! joint channel-estimation / detection loop, a finite-difference Adam
//! trainer for the per-layer scalars and a Monte Carlo BER harness.
//!
//! Detectors work on the real-equivalent model (see [`model`]). Channel
//! estimation works on complex matrices and converts at its boundary.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chanest;
pub mod detect;
pub mod error;
pub mod harness;
pub mod jcesd;
pub mod linalg;
pub mod model;
pub mod modem;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
