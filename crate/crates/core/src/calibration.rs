//! Inverting and sweeping the accountant.
//!
//! Bisection finds the smallest noise multiplier that meets a target ε;
//! grid sweeps and iso-ε contours tabulate how σ must scale with the
//! sampling rate q to hold the privacy guarantee fixed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{build_curve, default_orders, to_eps_delta, Conversion, EpsDelta, PrivacyParams};
use crate::error::{Error, Result};

pub const DEFAULT_SIGMA_LO: f64 = 0.3;
pub const DEFAULT_SIGMA_HI: f64 = 64.0;
pub const DEFAULT_SIGMA_TOL: f64 = 1e-4;

/// Expected number of Poisson-sampled steps in `epochs` passes: `round(epochs / q)`,
/// ties to even, never less than one.
pub fn steps_from_epochs(epochs: u64, q: f64) -> Result<u64> {
    if epochs == 0 {
        return Err(Error::domain("epochs must be >= 1"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::domain(format!("sampling rate q={q} outside (0, 1]")));
    }
    Ok(((epochs as f64 / q).round_ties_even() as u64).max(1))
}

/// Orders and conversion rule used to turn RDP into (ε, δ).
#[derive(Debug, Clone, PartialEq)]
pub struct AccountingRule {
    pub orders: Vec<f64>,
    pub conversion: Conversion,
}

impl Default for AccountingRule {
    fn default() -> Self {
        Self {
            orders: default_orders(),
            conversion: Conversion::Improved,
        }
    }
}

impl AccountingRule {
    pub fn with_conversion(conversion: Conversion) -> Self {
        Self {
            conversion,
            ..Self::default()
        }
    }

    pub fn eps(&self, q: f64, sigma: f64, steps: u64, delta: f64) -> Result<EpsDelta> {
        let params = PrivacyParams::new(q, sigma, delta, steps)?;
        let curve = build_curve(&params, &self.orders)?;
        to_eps_delta(&curve, delta, self.conversion)
    }
}

/// ε after `steps` noisy updates, with the default orders and improved conversion.
pub fn eps_for(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<EpsDelta> {
    AccountingRule::default().eps(q, sigma, steps, delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Horizon {
    Epochs(u64),
    Steps(u64),
}

impl Horizon {
    pub fn steps(&self, q: f64) -> Result<u64> {
        match *self {
            Horizon::Epochs(e) => steps_from_epochs(e, q),
            Horizon::Steps(0) => Err(Error::domain("steps must be >= 1")),
            Horizon::Steps(s) => Ok(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub target_eps: f64,
    pub delta: f64,
    pub q: f64,
    pub horizon: Horizon,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub tolerance: f64,
}

impl CalibrationTarget {
    /// Target with the default σ bracket and tolerance.
    pub fn new(target_eps: f64, delta: f64, q: f64, horizon: Horizon) -> Self {
        Self {
            target_eps,
            delta,
            q,
            horizon,
            sigma_lo: DEFAULT_SIGMA_LO,
            sigma_hi: DEFAULT_SIGMA_HI,
            tolerance: DEFAULT_SIGMA_TOL,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.target_eps > 0.0) || !self.target_eps.is_finite() {
            return Err(Error::domain(format!("target eps {} must be positive", self.target_eps)));
        }
        if !(self.sigma_lo > 0.0 && self.sigma_lo < self.sigma_hi) {
            return Err(Error::domain(format!(
                "sigma bracket [{}, {}] is not a positive interval",
                self.sigma_lo, self.sigma_hi
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::domain("sigma tolerance must be positive"));
        }
        Ok(())
    }
}

/// Smallest σ (to within `target.tolerance`) with ε(σ) ≤ target ε.
///
/// The returned σ is the upper end of the final bisection bracket, so the
/// guarantee always holds at the value handed back.
pub fn calibrate_sigma(target: &CalibrationTarget) -> Result<f64> {
    calibrate_sigma_with(target, &AccountingRule::default())
}

pub fn calibrate_sigma_with(target: &CalibrationTarget, rule: &AccountingRule) -> Result<f64> {
    target.validate()?;
    let steps = target.horizon.steps(target.q)?;
    let eps = |sigma: f64| rule.eps(target.q, sigma, steps, target.delta).map(|e| e.eps);

    let (mut lo, mut hi) = (target.sigma_lo, target.sigma_hi);
    let (eps_lo, eps_hi) = (eps(lo)?, eps(hi)?);
    if !(eps_lo > target.target_eps && eps_hi <= target.target_eps) {
        return Err(Error::Bracket {
            target: target.target_eps,
            lo,
            hi,
            eps_lo,
            eps_hi,
        });
    }
    while hi - lo > target.tolerance {
        let mid = 0.5 * (lo + hi);
        if eps(mid)? <= target.target_eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    pub delta: f64,
    pub epsilon: f64,
    pub best_order: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

fn sorted_grid(name: &str, values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::domain(format!("{name} grid is empty")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain(format!("{name} grid contains a non-finite value")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    Ok(v)
}

/// ε for every (q, σ) cell, rows ordered by (q, σ).
pub fn sweep_grid(q_list: &[f64], sigma_list: &[f64], epochs: u64, delta: f64) -> Result<SweepResult> {
    sweep_grid_with(q_list, sigma_list, epochs, delta, &AccountingRule::default())
}

pub fn sweep_grid_with(
    q_list: &[f64],
    sigma_list: &[f64],
    epochs: u64,
    delta: f64,
    rule: &AccountingRule,
) -> Result<SweepResult> {
    let qs = sorted_grid("q", q_list)?;
    let sigmas = sorted_grid("sigma", sigma_list)?;
    let cells: Vec<(f64, f64)> = qs
        .iter()
        .flat_map(|&q| sigmas.iter().map(move |&s| (q, s)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(q, sigma)| {
            let steps = steps_from_epochs(epochs, q)?;
            let e = rule.eps(q, sigma, steps, delta)?;
            Ok(SweepRow {
                q,
                sigma,
                steps,
                delta,
                epsilon: e.eps,
                best_order: e.best_order,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContourStatus {
    Calibrated,
    /// Even the largest σ in the bracket leaves ε above the target.
    Infeasible,
    /// The smallest σ in the bracket already meets the target.
    BelowBracket,
}

impl ContourStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ContourStatus::Calibrated => "calibrated",
            ContourStatus::Infeasible => "infeasible",
            ContourStatus::BelowBracket => "below_bracket",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourPoint {
    pub target_eps: f64,
    pub q: f64,
    pub steps: u64,
    /// `None` unless `status` is `Calibrated`.
    pub sigma: Option<f64>,
    pub status: ContourStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourLine {
    pub target_eps: f64,
    pub points: Vec<ContourPoint>,
}

/// Calibrated σ for each target ε and each q.
pub fn contour(target_eps_list: &[f64], q_list: &[f64], epochs: u64, delta: f64) -> Result<Vec<ContourLine>> {
    let targets = sorted_grid("target eps", target_eps_list)?;
    let qs = sorted_grid("q", q_list)?;
    let rule = AccountingRule::default();
    targets
        .iter()
        .map(|&target_eps| {
            let points = qs
                .par_iter()
                .map(|&q| {
                    let target = CalibrationTarget::new(target_eps, delta, q, Horizon::Epochs(epochs));
                    let steps = target.horizon.steps(q)?;
                    let (sigma, status) = match calibrate_sigma_with(&target, &rule) {
                        Ok(s) => (Some(s), ContourStatus::Calibrated),
                        Err(Error::Bracket { eps_hi, .. }) if eps_hi > target_eps => {
                            (None, ContourStatus::Infeasible)
                        }
                        Err(Error::Bracket { .. }) => (None, ContourStatus::BelowBracket),
                        Err(e) => return Err(e),
                    };
                    Ok(ContourPoint {
                        target_eps,
                        q,
                        steps,
                        sigma,
                        status,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ContourLine { target_eps, points })
        })
        .collect()
}

/// Least-squares fit of `ln σ = ln c + k·ln q` over calibrated points;
/// returns `(k, c)`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::domain("power-law fit needs at least two points"));
    }
    if points.iter().any(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return Err(Error::domain("power-law fit needs positive coordinates"));
    }
    let n = points.len() as f64;
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::domain("power-law fit needs distinct abscissae"));
    }
    let slope = sxy / sxx;
    Ok((slope, (my - slope * mx).exp()))
}
