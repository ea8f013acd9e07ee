//! Conduct-parameter structural model of price setting.
//!
//! Demand is linear,
//!   Q = alpha0 + alpha1 * P + alpha2'Z + phi,
//! and the price equation is
//!   P = theta0 + gamma * Q + theta2'W + theta3 * I + vartheta,
//! where gamma = theta1 - lambda / alpha1 bundles the marginal-cost slope
//! theta1 with the conduct parameter lambda (0 = price taking, 1 = joint
//! monopoly). Only gamma is identified from a single demand regime: adding a
//! constant to lambda and theta1 - lambda/alpha1-compensating theta1 leaves
//! every observable unchanged. With two demand-slope regimes the pair
//! (theta1, lambda) separates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard for the equilibrium denominator 1 - gamma * alpha1.
pub const DENOMINATOR_TOL: f64 = 1e-6;

/// Linear demand parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandParams {
    pub alpha0: f64,
    /// Price slope; must be nonzero (and negative for downward demand).
    pub alpha1: f64,
    /// Demand-shifter loadings.
    pub alpha2: Vec<f64>,
}

/// Post-merger efficiency: either a one-time marginal-cost change, or
/// per-quarter increments that cumulate over the post period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theta3 {
    Scalar(f64),
    /// `quarterly[k-1]` is the additional cost change arriving in the k-th
    /// post-merger quarter; the level effect at step k is the running sum.
    Quarterly(Vec<f64>),
}

impl Theta3 {
    /// Cumulative cost change in effect at post-merger step `k` (1-based);
    /// zero for `k <= 0`.
    pub fn cumulative(&self, k: i64) -> f64 {
        if k <= 0 {
            return 0.0;
        }
        match self {
            Theta3::Scalar(v) => *v,
            Theta3::Quarterly(incr) => incr
                .iter()
                .take(k.min(incr.len() as i64) as usize)
                .sum(),
        }
    }

    /// Average level effect over the post window, weighting step k by
    /// (T + 1 - k) / T — each increment is in effect for its remaining
    /// quarters.
    pub fn average_over(&self, post_window: usize) -> f64 {
        let t = post_window as f64;
        match self {
            Theta3::Scalar(v) => *v,
            Theta3::Quarterly(incr) => incr
                .iter()
                .enumerate()
                .take(post_window)
                .map(|(i, v)| v * (t - i as f64) / t)
                .sum(),
        }
    }
}

/// Price-equation parameters. `theta1` is the marginal-cost slope in
/// quantity; the regression-identified quantity slope is
/// [`nuisance_slope`]`(theta1, lambda, alpha1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupplyParams {
    pub theta0: f64,
    pub theta1: f64,
    /// Cost-shifter loadings.
    pub theta2: Vec<f64>,
    pub theta3: Theta3,
}

/// Conduct in [0, 1] for one regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conduct(pub f64);

impl Conduct {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!(
                "conduct parameter must lie in [0, 1]; got {lambda}"
            )));
        }
        Ok(Conduct(lambda))
    }
}

/// Composite quantity slope gamma = theta1 - lambda / alpha1 of the price
/// equation.
pub fn nuisance_slope(theta1: f64, lambda: f64, alpha1: f64) -> Result<f64> {
    if alpha1 == 0.0 {
        return Err(Error::Config("demand slope alpha1 must be nonzero".into()));
    }
    Ok(theta1 - lambda / alpha1)
}

/// Conduct change between regimes sharing one demand slope:
/// delta_lambda = -alpha1 * (gamma_post - gamma_pre).
pub fn delta_lambda(alpha1: f64, gamma_pre: f64, gamma_post: f64) -> f64 {
    -alpha1 * (gamma_post - gamma_pre)
}

/// Exogenous conditions at one market-quarter.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketConditions<'a> {
    pub z: &'a [f64],
    pub w: &'a [f64],
    /// Demand shock.
    pub phi: f64,
    /// Cost shock.
    pub vartheta: f64,
    /// Cumulative post-merger cost change in effect (zero pre-merger).
    pub efficiency: f64,
}

fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Config(format!(
            "shifter dimension mismatch: {} coefficients vs {} values",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// Closed-form equilibrium (price, quantity) given the composite quantity
/// slope `gamma` in effect.
pub fn equilibrium(
    demand: &DemandParams,
    supply: &SupplyParams,
    gamma: f64,
    mc: &MarketConditions<'_>,
) -> Result<(f64, f64)> {
    let denom = 1.0 - gamma * demand.alpha1;
    if denom.abs() < DENOMINATOR_TOL {
        return Err(Error::SingularDenominator(denom));
    }
    let demand_index = demand.alpha0 + dot(&demand.alpha2, mc.z)? + mc.phi;
    let price = (supply.theta0
        + gamma * demand_index
        + dot(&supply.theta2, mc.w)?
        + mc.efficiency
        + mc.vartheta)
        / denom;
    let quantity = demand_index + demand.alpha1 * price;
    Ok((price, quantity))
}

/// Equilibrium price response to a one-unit marginal-cost change:
/// theta3 / (1 - gamma * alpha1).
pub fn passthrough_price_effect(theta3: f64, gamma: f64, alpha1: f64) -> Result<f64> {
    let denom = 1.0 - gamma * alpha1;
    if denom.abs() < DENOMINATOR_TOL {
        return Err(Error::SingularDenominator(denom));
    }
    Ok(theta3 / denom)
}

/// The observationally equivalent parameter point obtained by shifting
/// conduct by `kappa` in both regimes and moving theta1 by kappa / alpha1.
/// Returns (theta1', lambda_pre', lambda_post').
pub fn observational_twin(
    theta1: f64,
    lambda_pre: f64,
    lambda_post: f64,
    alpha1: f64,
    kappa: f64,
) -> Result<(f64, f64, f64)> {
    if alpha1 == 0.0 {
        return Err(Error::Config("demand slope alpha1 must be nonzero".into()));
    }
    let pre = lambda_pre + kappa;
    let post = lambda_post + kappa;
    for l in [pre, post] {
        if !(0.0..=1.0).contains(&l) {
            return Err(Error::Config(format!(
                "twin conduct {l} falls outside [0, 1]; choose a smaller shift"
            )));
        }
    }
    Ok((theta1 + kappa / alpha1, pre, post))
}

/// Separate the cost slope theta1 and a common conduct lambda from two
/// demand regimes with distinct slopes: each regime r satisfies
/// gamma_r = theta1 - lambda / alpha1_r, so
/// theta1 = (alpha1_1 * gamma_1 - alpha1_2 * gamma_2) / (alpha1_1 - alpha1_2)
/// and lambda = alpha1_1 * (theta1 - gamma_1), clamped to [0, 1].
///
/// `regimes` holds (alpha1, gamma) per regime.
pub fn recover_conduct_two_regimes(regimes: [(f64, f64); 2]) -> Result<(f64, f64)> {
    let [(a1, g1), (a2, g2)] = regimes;
    if (a1 - a2).abs() < 1e-10 * a1.abs().max(1.0) {
        return Err(Error::Validation(format!(
            "demand slopes {a1} and {a2} are too close to separate conduct from costs"
        )));
    }
    let theta1 = (a1 * g1 - a2 * g2) / (a1 - a2);
    let lambda = (a1 * (theta1 - g1)).clamp(0.0, 1.0);
    Ok((theta1, lambda))
}
