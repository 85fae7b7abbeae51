//! Rényi-DP accounting for the (Poisson-subsampled) Gaussian mechanism.
//!
//! Per-step RDP is evaluated at a grid of orders, composed additively over
//! steps, and converted to an (ε, δ) guarantee by minimizing over the grid.
//! All binomial sums are carried out on log-magnitudes so that orders up to
//! a few hundred never overflow.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{self, QuadOptions};

/// Largest integer order on the default grid.
pub const MAX_DEFAULT_ORDER: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    /// Poisson sampling rate.
    pub q: f64,
    /// Noise multiplier: noise std divided by the clipping bound.
    pub sigma: f64,
    pub delta: f64,
    /// Number of noisy updates.
    pub steps: u64,
}

impl PrivacyParams {
    pub fn new(q: f64, sigma: f64, delta: f64, steps: u64) -> Result<Self> {
        let p = Self {
            q,
            sigma,
            delta,
            steps,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.q)?;
        check_sigma(self.sigma)?;
        check_delta(self.delta)
    }
}

/// RDP values (nats) at increasing Rényi orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<f64>,
    values: Vec<f64>,
}

impl RdpCurve {
    pub fn new(orders: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if orders.len() != values.len() {
            return Err(Error::Shape(format!(
                "{} orders but {} rdp values",
                orders.len(),
                values.len()
            )));
        }
        check_orders(&orders)?;
        if let Some(v) = values.iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(Error::domain(format!("rdp value {v} is not a nonnegative number")));
        }
        Ok(Self { orders, values })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    /// Composition with another curve over the same orders.
    pub fn compose(&self, other: &RdpCurve) -> Result<RdpCurve> {
        if self.orders != other.orders {
            return Err(Error::Shape("cannot compose curves over different orders".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(RdpCurve {
            orders: self.orders.clone(),
            values,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsDelta {
    pub eps: f64,
    pub delta: f64,
    pub best_order: f64,
}

/// RDP → (ε, δ) conversion rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conversion {
    /// ε = rdp(α) + ln(1/δ)/(α−1)
    Classic,
    /// ε = rdp(α) + ln((α−1)/α) − (ln δ + ln α)/(α−1)
    #[default]
    Improved,
}

impl fmt::Display for Conversion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Conversion::Classic => "classic",
            Conversion::Improved => "improved",
        })
    }
}

impl FromStr for Conversion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classic" => Ok(Conversion::Classic),
            "improved" => Ok(Conversion::Improved),
            other => Err(Error::domain(format!(
                "unknown conversion {other:?} (expected classic or improved)"
            ))),
        }
    }
}

fn check_rate(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::domain(format!("sampling rate q={q} outside [0, 1]")));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::domain(format!("noise multiplier sigma={sigma} must be positive and finite")));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!("delta={delta} outside (0, 1)")));
    }
    Ok(())
}

fn check_orders(orders: &[f64]) -> Result<()> {
    if orders.is_empty() {
        return Err(Error::domain("order list is empty"));
    }
    if let Some(a) = orders.iter().find(|a| !(**a > 1.0) || !a.is_finite()) {
        return Err(Error::domain(format!("Rényi order {a} must be finite and > 1")));
    }
    if orders.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::domain("Rényi orders must be strictly increasing"));
    }
    Ok(())
}

/// Integer orders 2..=256.
pub fn default_orders() -> Vec<f64> {
    (2..=MAX_DEFAULT_ORDER).map(f64::from).collect()
}

/// RDP of the Gaussian mechanism with sensitivity 1 and noise multiplier `sigma`.
pub fn rdp_gaussian(alpha: f64, sigma: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::domain(format!("Rényi order {alpha} must be > 1")));
    }
    check_sigma(sigma)?;
    Ok(alpha / (2.0 * sigma * sigma))
}

fn ln_binomial(n: u32, k: u32) -> f64 {
    let n = f64::from(n);
    let k = f64::from(k);
    libm::lgamma(n + 1.0) - libm::lgamma(k + 1.0) - libm::lgamma(n - k + 1.0)
}

/// Numerically stable `ln Σ exp(x_i)`; `-inf` entries contribute nothing.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// RDP at integer order `alpha` of the Poisson-subsampled Gaussian mechanism.
///
/// Evaluates `ln Σ_k C(α,k) (1−q)^{α−k} q^k exp(k(k−1)/(2σ²)) / (α−1)`
/// with every term kept as a logarithm.
pub fn rdp_subsampled_gaussian_int(alpha: u32, q: f64, sigma: f64) -> Result<f64> {
    if alpha < 2 {
        return Err(Error::domain(format!("integer Rényi order {alpha} must be >= 2")));
    }
    check_rate(q)?;
    check_sigma(sigma)?;
    if q == 0.0 {
        return Ok(0.0);
    }

    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let two_var = 2.0 * sigma * sigma;
    let terms: Vec<f64> = (0..=alpha)
        .map(|k| {
            let kf = f64::from(k);
            let rest = f64::from(alpha - k);
            // Guard 0 * (-inf) at the q = 1 endpoint.
            let sampled = if k == 0 { 0.0 } else { kf * log_q };
            let unsampled = if k == alpha { 0.0 } else { rest * log_1mq };
            ln_binomial(alpha, k) + unsampled + sampled + kf * (kf - 1.0) / two_var
        })
        .collect();
    let log_moment = log_sum_exp(&terms);
    Ok((log_moment / f64::from(alpha - 1)).max(0.0))
}

/// Options for the quadrature evaluation of subsampled-Gaussian RDP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdpQuadrature {
    /// Absolute tolerance on the (normalized) integral.
    pub abs_tol: f64,
    /// Integration runs over `[-width·σ, α + width·σ]`.
    pub width: f64,
}

impl Default for RdpQuadrature {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            width: 20.0,
        }
    }
}

/// Subsampled-Gaussian RDP at a real order by direct numerical integration.
///
/// Computes `ln E_{z~N(0,σ²)}[((1−q) + q·exp((2z−1)/(2σ²)))^α] / (α−1)`.
/// Independent of the binomial expansion, so it doubles as its oracle and
/// extends the accountant to fractional orders.
pub fn rdp_subsampled_gaussian_quadrature(
    alpha: f64,
    q: f64,
    sigma: f64,
    opts: &RdpQuadrature,
) -> Result<f64> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::domain(format!("Rényi order {alpha} must be finite and > 1")));
    }
    check_rate(q)?;
    check_sigma(sigma)?;
    if !(opts.abs_tol > 0.0) || !(opts.width > 0.0) {
        return Err(Error::domain("quadrature tolerance and width must be positive"));
    }
    if q == 0.0 {
        return Ok(0.0);
    }

    let var = sigma * sigma;
    let log_norm = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    // ln((1−q) + q·e^t), split by sign of t to stay finite.
    let log_mix = move |t: f64| -> f64 {
        if t > 0.0 {
            t + (q + (1.0 - q) * (-t).exp()).ln()
        } else {
            (q * t.exp_m1()).ln_1p()
        }
    };
    let log_integrand =
        move |z: f64| -> f64 { log_norm - z * z / (2.0 * var) + alpha * log_mix((2.0 * z - 1.0) / (2.0 * var)) };

    // The mixture components sit at z = 0..α with spread σ.
    let lo = -opts.width * sigma;
    let hi = alpha + opts.width * sigma;
    let grid = 4096;
    let peak = (0..=grid)
        .map(|i| log_integrand(lo + (hi - lo) * i as f64 / grid as f64))
        .fold(f64::NEG_INFINITY, f64::max);

    let quad = QuadOptions {
        abs_tol: opts.abs_tol,
        rel_tol: 1e-13,
        max_intervals: 1 << 14,
        initial_pieces: ((hi - lo) / sigma).ceil().clamp(16.0, 512.0) as usize,
    };

    let log_moment = if peak < 30.0 {
        // Integrate the excess over 1 directly so small moments keep their digits.
        let excess = quadrature::integrate(
            |z| {
                let lm = log_mix((2.0 * z - 1.0) / (2.0 * var));
                (log_norm - z * z / (2.0 * var)).exp() * (alpha * lm).exp_m1()
            },
            lo,
            hi,
            &quad,
        )?;
        excess.value.ln_1p()
    } else {
        let scaled = quadrature::integrate(|z| (log_integrand(z) - peak).exp(), lo, hi, &quad)?;
        peak + scaled.value.ln()
    };
    Ok((log_moment / (alpha - 1.0)).max(0.0))
}

/// Per-step RDP at a single order: exact binomial sum at integer orders,
/// quadrature otherwise.
pub fn rdp_step(alpha: f64, q: f64, sigma: f64) -> Result<f64> {
    if alpha.fract() == 0.0 && alpha >= 2.0 && alpha <= f64::from(u32::MAX) {
        rdp_subsampled_gaussian_int(alpha as u32, q, sigma)
    } else {
        rdp_subsampled_gaussian_quadrature(alpha, q, sigma, &RdpQuadrature::default())
    }
}

/// RDP of `params.steps` compositions of the subsampled Gaussian mechanism.
pub fn build_curve(params: &PrivacyParams, orders: &[f64]) -> Result<RdpCurve> {
    params.validate()?;
    check_orders(orders)?;
    let steps = params.steps as f64;
    let values = orders
        .iter()
        .map(|&alpha| {
            if params.steps == 0 {
                Ok(0.0)
            } else {
                rdp_step(alpha, params.q, params.sigma).map(|v| v * steps)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    RdpCurve::new(orders.to_vec(), values)
}

/// Smallest ε over the curve's orders for the given δ.
///
/// A curve that is identically zero describes a mechanism whose outputs do
/// not depend on the data, which is (0, δ)-DP for every δ.
pub fn to_eps_delta(curve: &RdpCurve, delta: f64, conversion: Conversion) -> Result<EpsDelta> {
    if curve.is_empty() {
        return Err(Error::domain("cannot convert an empty RDP curve"));
    }
    check_delta(delta)?;
    if curve.values.iter().all(|v| *v == 0.0) {
        return Ok(EpsDelta {
            eps: 0.0,
            delta,
            best_order: curve.orders[0],
        });
    }

    let log_delta = delta.ln();
    let mut best = (f64::INFINITY, curve.orders[0]);
    for (&alpha, &rdp) in curve.orders.iter().zip(&curve.values) {
        let eps = match conversion {
            Conversion::Classic => rdp - log_delta / (alpha - 1.0),
            Conversion::Improved => {
                rdp + ((alpha - 1.0) / alpha).ln() - (log_delta + alpha.ln()) / (alpha - 1.0)
            }
        };
        if eps < best.0 {
            best = (eps, alpha);
        }
    }
    Ok(EpsDelta {
        eps: best.0.max(0.0),
        delta,
        best_order: best.1,
    })
}
