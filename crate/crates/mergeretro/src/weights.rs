//! Synthetic-control weighting for the difference-in-differences design.
//!
//! Market weights reweight control markets so their pre-merger (residualized)
//! price paths track the treated average; time weights reweight pre-merger
//! quarters to predict each control market's post-merger level. Both are
//! simplex-constrained least-squares problems; the market problem carries a
//! ridge penalty that spreads weight across donors. Minimization uses
//! accelerated projected gradient descent with exact Euclidean projection
//! onto the simplex (the sort-based algorithm of Duchi et al. 2008).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::panel::{MarketId, PanelDataset, QuarterIndex};

/// Residualized pre/post price blocks used by both weight problems.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualizedBlock {
    pub control_markets: Vec<MarketId>,
    pub treated_markets: Vec<MarketId>,
    pub pre_quarters: Vec<QuarterIndex>,
    pub post_quarters: Vec<QuarterIndex>,
    /// N_control x T_pre residualized prices.
    pub control_pre: DMatrix<f64>,
    /// Per-control-market mean over post quarters.
    pub control_post_mean: Vec<f64>,
    /// N_treated x T_pre residualized prices.
    pub treated_pre: DMatrix<f64>,
    /// Per-treated-market mean over post quarters.
    pub treated_post_mean: Vec<f64>,
    /// Cross-treated average per pre quarter.
    pub treated_pre_mean: Vec<f64>,
}

/// Residualize prices on [1, Z, W] (coefficients fit on control observations
/// only) and assemble the balanced pre/post blocks inside the treatment
/// window. Every market must be observed in each pre-window quarter and at
/// least one post-window quarter.
pub fn residualize(data: &PanelDataset) -> Result<ResidualizedBlock> {
    let plan = &data.plan;
    let quarters = data.quarters();
    let pre_quarters: Vec<QuarterIndex> = quarters
        .iter()
        .copied()
        .filter(|&q| q < plan.merger_quarter && q >= plan.merger_quarter - plan.pre_window as i64)
        .collect();
    let post_quarters: Vec<QuarterIndex> = quarters
        .iter()
        .copied()
        .filter(|&q| q >= plan.merger_quarter && q < plan.merger_quarter + plan.post_window as i64)
        .collect();
    if pre_quarters.is_empty() || post_quarters.is_empty() {
        return Err(Error::Validation(
            "treatment window has no pre- or no post-merger quarters".into(),
        ));
    }

    let markets = data.markets();
    let (treated_markets, control_markets): (Vec<_>, Vec<_>) = markets
        .into_iter()
        .partition(|m| plan.is_treated(m));
    if treated_markets.is_empty() || control_markets.is_empty() {
        return Err(Error::Validation(
            "synthetic weighting needs both treated and control markets".into(),
        ));
    }

    // Fit price ~ [1, Z, W] on control observations inside the window.
    let (p, q) = (data.z_dim(), data.w_dim());
    let in_window = |t: QuarterIndex| {
        t >= plan.merger_quarter - plan.pre_window as i64
            && t < plan.merger_quarter + plan.post_window as i64
    };
    let mut x_rows = Vec::new();
    let mut y_vals = Vec::new();
    for o in data.observations() {
        if plan.is_treated(&o.market) || !in_window(o.quarter) {
            continue;
        }
        let mut row = vec![1.0];
        row.extend_from_slice(&o.z);
        row.extend_from_slice(&o.w);
        x_rows.push(row);
        y_vals.push(o.price);
    }
    let k = 1 + p + q;
    let x = DMatrix::from_fn(x_rows.len(), k, |i, j| x_rows[i][j]);
    let y = DVector::from_vec(y_vals);
    let coef = linalg::ols(&x, &y, "price residualization on covariates")?;

    let resid = |m: &MarketId, t: QuarterIndex| -> Result<f64> {
        let o = data.get(m, t).ok_or_else(|| {
            Error::Validation(format!(
                "market {m} missing quarter {t} inside the treatment window"
            ))
        })?;
        let mut fitted = coef[0];
        for j in 0..p {
            fitted += coef[1 + j] * o.z[j];
        }
        for j in 0..q {
            fitted += coef[1 + p + j] * o.w[j];
        }
        Ok(o.price - fitted)
    };

    let pre_block = |set: &[MarketId]| -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(set.len(), pre_quarters.len());
        for (i, mk) in set.iter().enumerate() {
            for (j, &t) in pre_quarters.iter().enumerate() {
                m[(i, j)] = resid(mk, t)?;
            }
        }
        Ok(m)
    };
    let post_mean = |set: &[MarketId]| -> Result<Vec<f64>> {
        set.iter()
            .map(|mk| {
                let vals: Vec<f64> = post_quarters
                    .iter()
                    .filter_map(|&t| data.get(mk, t).map(|_| resid(mk, t)))
                    .collect::<Result<_>>()?;
                if vals.is_empty() {
                    return Err(Error::Validation(format!(
                        "market {mk} has no post-merger observations in the window"
                    )));
                }
                Ok(vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect()
    };

    let control_pre = pre_block(&control_markets)?;
    let treated_pre = pre_block(&treated_markets)?;
    let treated_pre_mean = (0..pre_quarters.len())
        .map(|j| treated_pre.column(j).sum() / treated_markets.len() as f64)
        .collect();
    let control_post_mean = post_mean(&control_markets)?;
    let treated_post_mean = post_mean(&treated_markets)?;

    Ok(ResidualizedBlock {
        control_markets,
        treated_markets,
        pre_quarters,
        post_quarters,
        control_pre,
        control_post_mean,
        treated_pre,
        treated_post_mean,
        treated_pre_mean,
    })
}

/// Exact Euclidean projection of `v` onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (i + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Iteration cap for the accelerated projected-gradient solver.
const MAX_SOLVER_ITERS: usize = 100_000;
/// Relative objective-improvement stopping tolerance.
const SOLVER_TOL: f64 = 1e-12;

/// Minimize ||A w - b||^2 + ridge * ||w||^2 over the probability simplex.
///
/// FISTA with objective-restart; uniform start, so fully symmetric
/// (degenerate) problems return the uniform weights.
pub fn solve_simplex_ls(a: &DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> Result<Vec<f64>> {
    let n = a.ncols();
    if n == 0 {
        return Err(Error::Validation("no donor units to weight".into()));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let mut gram = a.transpose() * a;
    for i in 0..n {
        gram[(i, i)] += ridge;
    }
    let lin = a.transpose() * b;
    if gram.amax() < 1e-14 && lin.amax() < 1e-14 {
        return Ok(vec![1.0 / n as f64; n]);
    }

    // Lipschitz constant of the gradient: 2 * lambda_max(gram), by power
    // iteration.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64) * 1e-3);
    let mut lmax = 0.0;
    for _ in 0..100 {
        let gv = &gram * &v;
        let norm = gv.norm();
        if norm < 1e-300 {
            break;
        }
        lmax = norm / v.norm();
        v = gv / norm;
    }
    let step = 1.0 / (2.0 * lmax.max(1e-300));

    let obj = |w: &DVector<f64>| (w.transpose() * &gram * w)[(0, 0)] - 2.0 * lin.dot(w);
    let mut w = DVector::from_element(n, 1.0 / n as f64);
    let mut y = w.clone();
    let mut t = 1.0f64;
    let mut prev_obj = obj(&w);
    let mut last_improvement = f64::INFINITY;
    for _ in 0..MAX_SOLVER_ITERS {
        let grad = 2.0 * (&gram * &y - &lin);
        let w_new = DVector::from_vec(project_simplex(
            (&y - step * grad).as_slice(),
        ));
        let new_obj = obj(&w_new);
        if new_obj > prev_obj {
            // Objective restart: fall back to plain projected gradient from w.
            y = w.clone();
            t = 1.0;
            let grad = 2.0 * (&gram * &y - &lin);
            let w_pg = DVector::from_vec(project_simplex((&y - step * grad).as_slice()));
            let pg_obj = obj(&w_pg);
            last_improvement = prev_obj - pg_obj;
            if last_improvement.abs() < SOLVER_TOL * prev_obj.abs().max(1.0) {
                return Ok(w_pg.iter().copied().collect());
            }
            w = w_pg;
            y = w.clone();
            prev_obj = pg_obj;
            continue;
        }
        last_improvement = prev_obj - new_obj;
        if last_improvement < SOLVER_TOL * prev_obj.abs().max(1.0) {
            return Ok(w_new.iter().copied().collect());
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &w_new + ((t - 1.0) / t_new) * (&w_new - &w);
        w = w_new;
        t = t_new;
        prev_obj = new_obj;
    }
    Err(Error::NonConvergence(last_improvement))
}

/// Data-driven ridge scale: (N_treated * T_post)^(1/4) times the standard
/// deviation of first differences of the control pre-period residuals.
pub fn auto_zeta(block: &ResidualizedBlock) -> f64 {
    let mut diffs = Vec::new();
    for i in 0..block.control_pre.nrows() {
        for j in 1..block.control_pre.ncols() {
            diffs.push(block.control_pre[(i, j)] - block.control_pre[(i, j - 1)]);
        }
    }
    if diffs.len() < 2 {
        return 0.0;
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
    let scale = (block.treated_markets.len() * block.post_quarters.len()) as f64;
    scale.powf(0.25) * var.sqrt()
}

/// Market weights: intercept and simplex weights over control markets whose
/// weighted pre-period path tracks the treated average, with ridge
/// zeta^2 * T_pre.
pub fn solve_market_weights(block: &ResidualizedBlock, zeta: f64) -> Result<(f64, Vec<f64>)> {
    let t_pre = block.pre_quarters.len();
    let n_co = block.control_markets.len();
    // Rows = pre quarters, columns = control markets; demean each column over
    // time (the intercept absorbs the level).
    let mut a = DMatrix::from_fn(t_pre, n_co, |t, i| block.control_pre[(i, t)]);
    let mut col_means = vec![0.0; n_co];
    for i in 0..n_co {
        let mean = a.column(i).sum() / t_pre as f64;
        col_means[i] = mean;
        for t in 0..t_pre {
            a[(t, i)] -= mean;
        }
    }
    let y_mean = block.treated_pre_mean.iter().sum::<f64>() / t_pre as f64;
    let b = DVector::from_fn(t_pre, |t, _| block.treated_pre_mean[t] - y_mean);
    let ridge = zeta * zeta * t_pre as f64;
    let w = solve_simplex_ls(&a, &b, ridge)?;
    let intercept = y_mean
        - w.iter()
            .zip(&col_means)
            .map(|(wi, mi)| wi * mi)
            .sum::<f64>();
    Ok((intercept, w))
}

/// Time weights: intercept and simplex weights over pre-merger quarters whose
/// weighted combination predicts each control market's post-period mean. No
/// ridge.
pub fn solve_time_weights(block: &ResidualizedBlock) -> Result<(f64, Vec<f64>)> {
    let t_pre = block.pre_quarters.len();
    let n_co = block.control_markets.len();
    // Rows = control markets, columns = pre quarters; demean each column over
    // markets.
    let mut a = block.control_pre.clone();
    let mut col_means = vec![0.0; t_pre];
    for j in 0..t_pre {
        let mean = a.column(j).sum() / n_co as f64;
        col_means[j] = mean;
        for i in 0..n_co {
            a[(i, j)] -= mean;
        }
    }
    let y_mean = block.control_post_mean.iter().sum::<f64>() / n_co as f64;
    let b = DVector::from_fn(n_co, |i, _| block.control_post_mean[i] - y_mean);
    let w = solve_simplex_ls(&a, &b, 0.0)?;
    let intercept = y_mean
        - w.iter()
            .zip(&col_means)
            .map(|(wi, mi)| wi * mi)
            .sum::<f64>();
    Ok((intercept, w))
}

/// Solved market and time weights with their intercepts and the ridge used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdidWeights {
    pub market_intercept: f64,
    pub market_weights: BTreeMap<MarketId, f64>,
    pub time_intercept: f64,
    pub time_weights: BTreeMap<QuarterIndex, f64>,
    pub zeta: f64,
}

/// Residualize and solve both weight problems; `zeta = None` selects the
/// data-driven ridge scale.
pub fn solve_sdid_weights(data: &PanelDataset, zeta: Option<f64>) -> Result<SdidWeights> {
    let block = residualize(data)?;
    solve_sdid_weights_from_block(&block, zeta)
}

/// As [`solve_sdid_weights`] on an already residualized block.
pub fn solve_sdid_weights_from_block(
    block: &ResidualizedBlock,
    zeta: Option<f64>,
) -> Result<SdidWeights> {
    let zeta = zeta.unwrap_or_else(|| auto_zeta(block));
    if !(zeta >= 0.0) {
        return Err(Error::Config(format!("ridge scale zeta must be >= 0; got {zeta}")));
    }
    let (market_intercept, omega) = solve_market_weights(block, zeta)?;
    let (time_intercept, tau) = solve_time_weights(block)?;
    Ok(SdidWeights {
        market_intercept,
        market_weights: block
            .control_markets
            .iter()
            .cloned()
            .zip(omega)
            .collect(),
        time_intercept,
        time_weights: block.pre_quarters.iter().copied().zip(tau).collect(),
        zeta,
    })
}
