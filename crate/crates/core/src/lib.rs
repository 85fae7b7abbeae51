//! Privacy accounting and gradient-noise analysis for differentially private SGD.
//!
//! * [`accountant`]: Rényi-DP of the subsampled Gaussian mechanism and
//!   conversion to (ε, δ).
//! * [`calibration`]: σ for a target ε, grid sweeps and iso-ε contours.
//! * [`models`]: logistic regression and a tanh MLP with per-sample gradients.
//! * [`dpsgd`]: GD / SGD / DP-SGD / DP-GD training with privacy tracking.
//! * [`noise_meter`]: inherent vs. additive gradient noise.
//! * [`data`]: IDX files, synthetic blobs, splits.
//! * [`cli`]: the `dp-noise-ledger` command-line surface.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod accountant;
pub mod calibration;
pub mod cli;
pub mod data;
pub mod dpsgd;
pub mod error;
pub mod models;
pub mod noise_meter;
pub mod quadrature;

pub use error::{Error, Result};
