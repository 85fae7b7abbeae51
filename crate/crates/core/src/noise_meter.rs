//! Splitting the noise in a DP-SGD update into its two sources.
//!
//! *Inherent* noise is the spread of the minibatch mean gradient around the
//! full-data mean gradient; it is not reflected in ε. *Additive* noise is
//! the injected Gaussian, fully accounted for. Both are reported as totals
//! summed over all coordinates, and the accounted fraction is
//! `additive / (additive + inherent)`.
//!
//! The inherent scale uses the with-replacement approximation
//! `(1/B)·tr Cov(g_i)`. Sampling without replacement would multiply it by
//! `(N − B)/(N − 1)`, which vanishes at `B = N`; the approximation instead
//! reports `(1/N)·tr Cov` for full-batch steps.

use serde::{Deserialize, Serialize};

use crate::dpsgd::{clip_per_sample, ClipConfig};
use crate::error::{Error, Result};
use crate::models::GradientMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseContext {
    /// Batch size, or expected batch size `q·N` under Poisson sampling.
    pub batch_size: f64,
    pub q: Option<f64>,
    pub n: usize,
    pub d: usize,
    /// `None` when clipping is disabled.
    pub clip: Option<f64>,
    pub sigma: f64,
    pub step: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub inherent_scale: f64,
    pub additive_scale: f64,
    pub accounted_fraction: f64,
    pub context: NoiseContext,
}

/// How the batch size entering the scales is specified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Batching {
    Size(usize),
    /// Poisson rate; the expected batch size `q·N` is used.
    Rate(f64),
}

/// `(1/B)·(1/N)·Σ‖g_i − ḡ‖²` over the `N` rows of `grads`. `B` may be
/// fractional (an expected Poisson batch size `q·N`, possibly below 1).
pub fn inherent_noise_scale(grads: &GradientMatrix, batch_size: f64) -> Result<f64> {
    let n = grads.rows();
    if n < 2 {
        return Err(Error::domain(format!("inherent noise needs at least 2 gradients, got {n}")));
    }
    if !(batch_size > 0.0 && batch_size <= n as f64) {
        return Err(Error::domain(format!("batch size {batch_size} outside (0, {n}]")));
    }
    let mean = grads.mean_row();
    let spread: f64 = grads
        .iter_rows()
        .map(|g| g.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>())
        .sum();
    Ok(spread / n as f64 / batch_size)
}

/// Total variance `d·(C·σ)²/B²` of the Gaussian added to the averaged gradient.
pub fn additive_noise_scale(clip: f64, sigma: f64, batch_size: f64, d: usize) -> Result<f64> {
    if !(clip > 0.0) || !clip.is_finite() {
        return Err(Error::domain(format!("clip bound {clip} must be positive and finite")));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::domain(format!("noise multiplier {sigma} must be >= 0")));
    }
    if !(batch_size > 0.0) || !batch_size.is_finite() {
        return Err(Error::domain(format!("batch size {batch_size} must be positive")));
    }
    if d == 0 {
        return Err(Error::domain("dimension must be >= 1"));
    }
    let per_coord = clip * sigma / batch_size;
    Ok(d as f64 * per_coord * per_coord)
}

pub fn accounted_fraction(inherent: f64, additive: f64) -> f64 {
    let total = inherent + additive;
    if total > 0.0 {
        additive / total
    } else {
        0.0
    }
}

/// Builds a report from per-sample gradients over the full training set.
/// Gradients are clipped first when `clip` is bounded.
pub fn report(
    per_sample_grads: &GradientMatrix,
    batching: Batching,
    clip: ClipConfig,
    sigma: f64,
    step: Option<u64>,
) -> Result<NoiseReport> {
    let n = per_sample_grads.rows();
    let d = per_sample_grads.cols();
    let (batch_size, q) = match batching {
        Batching::Size(b) => (b as f64, None),
        Batching::Rate(q) => {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::domain(format!("sampling rate {q} outside (0, 1]")));
            }
            (q * n as f64, Some(q))
        }
    };
    let (inherent, additive) = match clip {
        ClipConfig::Bounded(c) => {
            let clipped = clip_per_sample(per_sample_grads, clip);
            (
                inherent_noise_scale(&clipped, batch_size)?,
                additive_noise_scale(c, sigma, batch_size, d)?,
            )
        }
        ClipConfig::Unbounded if sigma == 0.0 => (inherent_noise_scale(per_sample_grads, batch_size)?, 0.0),
        ClipConfig::Unbounded => {
            return Err(Error::Config("additive noise needs a finite clip bound".into()));
        }
    };
    Ok(NoiseReport {
        inherent_scale: inherent,
        additive_scale: additive,
        accounted_fraction: accounted_fraction(inherent, additive),
        context: NoiseContext {
            batch_size,
            q,
            n,
            d,
            clip: clip.bound(),
            sigma,
            step,
        },
    })
}
