//! Difference-in-differences estimators.
//!
//! Three families:
//! - two-way fixed effects with the treatment indicator I_mt,
//! - trend-adjusted variants (joint estimation, or pre-period trend
//!   extrapolation) with group- or market-specific linear trends,
//! - first-difference event study with per-quarter transition dummies.
//!
//! All standard errors are cluster-robust at the market level with CR1
//! small-sample scaling.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Absorber};
use crate::panel::{PanelDataset, QuarterIndex};
use crate::report::EstimateReport;

/// Outcome column selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeVar {
    Price,
    Quantity,
    Seats,
}

/// Outcome in levels or logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub var: OutcomeVar,
    pub log: bool,
}

impl OutcomeSpec {
    pub fn log_price() -> Self {
        OutcomeSpec { var: OutcomeVar::Price, log: true }
    }
    pub fn level_price() -> Self {
        OutcomeSpec { var: OutcomeVar::Price, log: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendMode {
    None,
    /// One linear trend per treatment group.
    GroupTrends,
    /// One linear trend per market.
    MarketTrends,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendMethod {
    /// Trends estimated jointly with the treatment effect on the full sample.
    Joint,
    /// Trends fit on pre-merger data only, extrapolated, and removed before
    /// the fixed-effects step. First-stage trend uncertainty is not
    /// propagated into the reported standard errors.
    PreEstimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Differencing {
    FixedEffects,
    FirstDifference,
}

/// Specification shared by all DiD entry points.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DidSpec {
    pub outcome: OutcomeSpec,
    /// Indices into `Observation::x` included as time-varying controls.
    #[serde(default)]
    pub controls: Vec<usize>,
    #[serde(default = "default_trend_mode")]
    pub trend_mode: TrendMode,
    #[serde(default = "default_trend_method")]
    pub trend_method: TrendMethod,
    #[serde(default = "default_differencing")]
    pub differencing: Differencing,
    #[serde(default = "default_horizon")]
    pub event_horizon: usize,
}

fn default_trend_mode() -> TrendMode {
    TrendMode::None
}
fn default_trend_method() -> TrendMethod {
    TrendMethod::Joint
}
fn default_differencing() -> Differencing {
    Differencing::FixedEffects
}
fn default_horizon() -> usize {
    8
}

impl DidSpec {
    pub fn fixed_effects(outcome: OutcomeSpec) -> Self {
        DidSpec {
            outcome,
            controls: Vec::new(),
            trend_mode: TrendMode::None,
            trend_method: TrendMethod::Joint,
            differencing: Differencing::FixedEffects,
            event_horizon: 8,
        }
    }

    pub fn event_study(outcome: OutcomeSpec, horizon: usize) -> Self {
        DidSpec {
            outcome,
            controls: Vec::new(),
            trend_mode: TrendMode::None,
            trend_method: TrendMethod::Joint,
            differencing: Differencing::FirstDifference,
            event_horizon: horizon,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.event_horizon < 1 {
            return Err(Error::Config("event_horizon must be >= 1".into()));
        }
        if self.trend_mode != TrendMode::None && self.differencing != Differencing::FixedEffects {
            return Err(Error::Config(
                "trend adjustment requires fixed-effects differencing".into(),
            ));
        }
        Ok(())
    }
}

/// One extracted estimation row.
struct Rows {
    y: Vec<f64>,
    controls: Vec<Vec<f64>>,
    treatment: Vec<f64>,
    market_idx: Vec<usize>,
    quarter_idx: Vec<usize>,
    quarters: Vec<QuarterIndex>,
    treated: Vec<bool>,
    n_markets: usize,
    n_dropped: usize,
}

fn extract_rows(data: &PanelDataset, spec: &DidSpec) -> Result<Rows> {
    let markets = data.markets();
    let market_pos = linalg::dense_groups(
        &data
            .observations()
            .iter()
            .map(|o| o.market.clone())
            .collect::<Vec<_>>(),
    );
    let quarter_pos = linalg::dense_groups(
        &data
            .observations()
            .iter()
            .map(|o| o.quarter)
            .collect::<Vec<_>>(),
    );

    let mut rows = Rows {
        y: Vec::new(),
        controls: vec![Vec::new(); spec.controls.len()],
        treatment: Vec::new(),
        market_idx: Vec::new(),
        quarter_idx: Vec::new(),
        quarters: Vec::new(),
        treated: Vec::new(),
        n_markets: markets.len(),
        n_dropped: 0,
    };
    for (i, obs) in data.observations().iter().enumerate() {
        let raw = match spec.outcome.var {
            OutcomeVar::Price => Some(obs.price),
            OutcomeVar::Quantity => Some(obs.quantity),
            OutcomeVar::Seats => obs.seats,
        };
        let Some(raw) = raw else {
            rows.n_dropped += 1;
            continue;
        };
        let y = if spec.outcome.log {
            if !(raw > 0.0) {
                return Err(Error::Validation(format!(
                    "log outcome requires positive values; got {raw} for ({}, q{})",
                    obs.market, obs.quarter
                )));
            }
            raw.ln()
        } else {
            raw
        };
        rows.y.push(y);
        for (c, &xi) in spec.controls.iter().enumerate() {
            let v = *obs.x.get(xi).ok_or_else(|| {
                Error::Config(format!("control index {xi} out of range for extra controls"))
            })?;
            rows.controls[c].push(v);
        }
        let treated = data.plan.is_treated(&obs.market);
        rows.treatment
            .push(f64::from(treated && obs.quarter >= data.plan.merger_quarter));
        rows.market_idx.push(market_pos[i]);
        rows.quarter_idx.push(quarter_pos[i]);
        rows.quarters.push(obs.quarter);
        rows.treated.push(treated);
    }
    if rows.y.is_empty() {
        return Err(Error::Validation("no usable observations for outcome".into()));
    }
    Ok(rows)
}

/// Convergence tolerance for iterated fixed-effect absorption.
const ABSORB_TOL: f64 = 1e-10;
const ABSORB_MAX_ITER: usize = 10_000;

/// Two-way fixed-effects DiD: within-transformed OLS of the outcome on the
/// treatment indicator and controls, absorbing market and quarter effects.
pub fn did_fixed_effects(data: &PanelDataset, spec: &DidSpec) -> Result<EstimateReport> {
    spec.validate()?;
    if spec.differencing != Differencing::FixedEffects {
        return Err(Error::Config(
            "did_fixed_effects requires differencing = fixed_effects".into(),
        ));
    }
    let rows = extract_rows(data, spec)?;
    fe_regression(&rows, &[])
}

/// Trend-adjusted DiD per the joint or pre-estimate method.
pub fn did_with_trends(data: &PanelDataset, spec: &DidSpec) -> Result<EstimateReport> {
    spec.validate()?;
    if spec.trend_mode == TrendMode::None {
        return Err(Error::Config("did_with_trends requires a trend mode".into()));
    }
    let mut rows = extract_rows(data, spec)?;
    match spec.trend_method {
        TrendMethod::Joint => {
            let mut report = match spec.trend_mode {
                TrendMode::GroupTrends => {
                    // Treated-group trend column; the control-group trend is
                    // absorbed by quarter effects.
                    let trend: Vec<f64> = rows
                        .quarters
                        .iter()
                        .zip(&rows.treated)
                        .map(|(&q, &tr)| if tr { q as f64 } else { 0.0 })
                        .collect();
                    fe_regression(&rows, &[("treated_trend".to_string(), trend)])?
                }
                TrendMode::MarketTrends => fe_regression_with_market_trends(&rows)?,
                TrendMode::None => unreachable!(),
            };
            report.diagnostics.insert("trend_method_joint".into(), 1.0);
            Ok(report)
        }
        TrendMethod::PreEstimate => {
            detrend_pre_estimate(&mut rows, spec, data.plan.merger_quarter)?;
            let mut report = fe_regression(&rows, &[])?;
            report.diagnostics.insert("trend_method_joint".into(), 0.0);
            Ok(report)
        }
    }
}

/// Remove per-unit linear trends fit on pre-merger observations only,
/// extrapolated through the post period.
fn detrend_pre_estimate(rows: &mut Rows, spec: &DidSpec, merger_quarter: QuarterIndex) -> Result<()> {
    let n = rows.y.len();
    // Unit = market under MarketTrends, treatment group under GroupTrends.
    let unit: Vec<usize> = match spec.trend_mode {
        TrendMode::MarketTrends => rows.market_idx.clone(),
        TrendMode::GroupTrends => rows.treated.iter().map(|&t| usize::from(t)).collect(),
        TrendMode::None => unreachable!(),
    };
    let g_max = unit.iter().copied().max().map_or(0, |m| m + 1);
    let mut count = vec![0usize; g_max];
    let mut st = vec![0.0f64; g_max];
    let mut stt = vec![0.0f64; g_max];
    let mut sy = vec![0.0f64; g_max];
    let mut sty = vec![0.0f64; g_max];
    for i in 0..n {
        if rows.quarters[i] < merger_quarter {
            let g = unit[i];
            let t = rows.quarters[i] as f64;
            count[g] += 1;
            st[g] += t;
            stt[g] += t * t;
            sy[g] += rows.y[i];
            sty[g] += t * rows.y[i];
        }
    }
    let mut intercept = vec![0.0f64; g_max];
    let mut slope = vec![0.0f64; g_max];
    for g in 0..g_max {
        if count[g] < 2 {
            return Err(Error::Validation(format!(
                "trend unit {g} has {} pre-merger observations; >= 2 required for pre-estimated trends",
                count[g]
            )));
        }
        let nf = count[g] as f64;
        let det = nf * stt[g] - st[g] * st[g];
        if det.abs() < 1e-12 {
            return Err(Error::Validation(format!(
                "trend unit {g}: degenerate pre-period time variation"
            )));
        }
        slope[g] = (nf * sty[g] - st[g] * sy[g]) / det;
        intercept[g] = (sy[g] - slope[g] * st[g]) / nf;
    }
    for i in 0..n {
        let g = unit[i];
        rows.y[i] -= intercept[g] + slope[g] * rows.quarters[i] as f64;
    }
    Ok(())
}

fn fe_regression(
    rows: &Rows,
    extra_regressors: &[(String, Vec<f64>)],
) -> Result<EstimateReport> {
    if rows.treatment.iter().all(|&v| v == 0.0) {
        return Err(Error::Validation("no treated observations".into()));
    }
    let mut names = vec!["beta_did".to_string()];
    let mut cols = vec![rows.y.clone(), rows.treatment.clone()];
    for (name, col) in extra_regressors {
        names.push(name.clone());
        cols.push(col.clone());
    }
    for (c, col) in rows.controls.iter().enumerate() {
        names.push(format!("x_{c}"));
        cols.push(col.clone());
    }
    let absorbers = [
        Absorber::GroupMean(rows.market_idx.clone()),
        Absorber::GroupMean(rows.quarter_idx.clone()),
    ];
    linalg::absorb(&mut cols, &absorbers, ABSORB_TOL, ABSORB_MAX_ITER);
    clustered_ols(&cols, &names, &rows.market_idx, rows.n_dropped, rows.n_markets)
}

fn fe_regression_with_market_trends(rows: &Rows) -> Result<EstimateReport> {
    if rows.treatment.iter().all(|&v| v == 0.0) {
        return Err(Error::Validation("no treated observations".into()));
    }
    let mut names = vec!["beta_did".to_string()];
    let mut cols = vec![rows.y.clone(), rows.treatment.clone()];
    for (c, col) in rows.controls.iter().enumerate() {
        names.push(format!("x_{c}"));
        cols.push(col.clone());
    }
    let time: Vec<f64> = rows.quarters.iter().map(|&q| q as f64).collect();
    let absorbers = [
        Absorber::GroupTrend {
            groups: rows.market_idx.clone(),
            time,
        },
        Absorber::GroupMean(rows.quarter_idx.clone()),
    ];
    linalg::absorb(&mut cols, &absorbers, ABSORB_TOL, ABSORB_MAX_ITER);
    clustered_ols(&cols, &names, &rows.market_idx, rows.n_dropped, rows.n_markets)
}

/// OLS of the first column on the rest with CR1 market-clustered covariance.
fn clustered_ols(
    cols: &[Vec<f64>],
    names: &[String],
    clusters: &[usize],
    n_dropped: usize,
    n_markets: usize,
) -> Result<EstimateReport> {
    let y = DVector::from_vec(cols[0].clone());
    let x = linalg::to_matrix(&cols[1..]);
    let n = y.len();
    let k = x.ncols();
    let xtx = x.transpose() * &x;
    let xtx_inv = linalg::invert_spd(&xtx, "regressor cross-product (collinear regressors?)")?;
    let beta = &xtx_inv * (x.transpose() * &y);
    let resid = &y - &x * &beta;
    let mut scores = DMatrix::<f64>::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            scores[(i, j)] = x[(i, j)] * resid[i];
        }
    }
    let vcov = linalg::cluster_vcov(&xtx_inv, &scores, clusters, k);
    let n_clusters = clusters.iter().copied().max().map_or(0, |m| m + 1);
    let mut report = EstimateReport::from_parts(
        names.to_vec(),
        beta.iter().copied().collect(),
        vcov,
        "market",
        n,
        n_clusters,
    );
    report
        .diagnostics
        .insert("n_dropped_rows".into(), n_dropped as f64);
    report
        .diagnostics
        .insert("n_markets".into(), n_markets as f64);
    Ok(report)
}

/// First-difference event-study DiD with per-quarter transition dummies.
///
/// The k-th dummy equals one only in the quarter a treated market enters its
/// k-th post-merger quarter; quarter dummies (base = first differenced
/// quarter) and differenced controls are included.
pub fn did_first_difference_event_study(
    data: &PanelDataset,
    spec: &DidSpec,
) -> Result<EstimateReport> {
    spec.validate()?;
    if spec.differencing != Differencing::FirstDifference {
        return Err(Error::Config(
            "event study requires differencing = first_difference".into(),
        ));
    }
    let horizon = spec.event_horizon as i64;
    let max_q = *data.quarters().last().unwrap();
    if data.plan.merger_quarter + horizon - 1 > max_q {
        return Err(Error::Validation(format!(
            "event horizon {horizon} exceeds available post-merger quarters \
             (last quarter {max_q}, merger at {})",
            data.plan.merger_quarter
        )));
    }

    let rows = extract_rows(data, spec)?;
    let n = rows.y.len();
    // Differenced rows: consecutive quarters within market.
    let mut dy = Vec::new();
    let mut d_controls = vec![Vec::new(); rows.controls.len()];
    let mut trans: Vec<Vec<f64>> = vec![Vec::new(); spec.event_horizon];
    let mut d_quarter = Vec::new();
    let mut d_market = Vec::new();
    let mut single_markets = std::collections::HashSet::new();
    let mut per_market_rows = 0usize;
    for i in 1..n {
        if rows.market_idx[i] != rows.market_idx[i - 1] {
            if per_market_rows == 0 {
                single_markets.insert(rows.market_idx[i - 1]);
            }
            per_market_rows = 0;
            continue;
        }
        if rows.quarters[i] != rows.quarters[i - 1] + 1 {
            continue;
        }
        per_market_rows += 1;
        dy.push(rows.y[i] - rows.y[i - 1]);
        for (c, col) in rows.controls.iter().enumerate() {
            d_controls[c].push(col[i] - col[i - 1]);
        }
        let step = rows.quarters[i] - data.plan.merger_quarter + 1;
        for k in 1..=horizon {
            trans[(k - 1) as usize]
                .push(f64::from(rows.treated[i] && step == k));
        }
        d_quarter.push(rows.quarters[i]);
        d_market.push(rows.market_idx[i]);
    }
    if dy.is_empty() {
        return Err(Error::Validation("no differenced observations".into()));
    }

    let mut names: Vec<String> = (1..=spec.event_horizon).map(|k| format!("beta_{k}")).collect();
    let mut cols = vec![dy];
    cols.extend(trans);
    for (c, col) in d_controls.into_iter().enumerate() {
        names.push(format!("dx_{c}"));
        cols.push(col);
    }
    // Quarter dummies, base = first differenced quarter.
    let mut qs: Vec<QuarterIndex> = d_quarter.clone();
    qs.sort_unstable();
    qs.dedup();
    for &q in qs.iter().skip(1) {
        names.push(format!("dq_{q}"));
        cols.push(d_quarter.iter().map(|&t| f64::from(t == q)).collect());
    }
    names.push("const".into());
    cols.push(vec![1.0; cols[0].len()]);

    let mut report = clustered_ols(&cols, &names, &d_market, rows.n_dropped, rows.n_markets)?;
    report
        .diagnostics
        .insert("n_single_obs_markets_dropped".into(), single_markets.len() as f64);
    Ok(report)
}

/// Aggregate the event-path coefficients `beta_1..beta_T` of an event-study
/// report via [`aggregate_event_effects`].
pub fn aggregate_event_study_report(
    report: &EstimateReport,
    horizon: usize,
) -> Result<(f64, f64)> {
    let betas: Vec<f64> = (1..=horizon)
        .map(|k| report.coefficient(&format!("beta_{k}")))
        .collect::<Result<_>>()?;
    let idx: Vec<usize> = (1..=horizon)
        .map(|k| report.position(&format!("beta_{k}")))
        .collect::<Result<_>>()?;
    let vcov = DMatrix::from_fn(horizon, horizon, |i, j| report.vcov[idx[i]][idx[j]]);
    aggregate_event_effects(&betas, &vcov)
}

/// Map a log-point estimate to a percentage change: (exp(beta) - 1) * 100.
pub fn percent_transform(beta: f64) -> f64 {
    (beta.exp() - 1.0) * 100.0
}

/// Weighted average of (exp(beta_k) - 1) with weights declining linearly over
/// time, w_k proportional to (T + 1 - k); delta-method standard error.
pub fn aggregate_event_effects(betas: &[f64], vcov: &DMatrix<f64>) -> Result<(f64, f64)> {
    let t = betas.len();
    if vcov.nrows() != t || vcov.ncols() != t {
        return Err(Error::Config(format!(
            "vcov is {}x{}, expected {t}x{t}",
            vcov.nrows(),
            vcov.ncols()
        )));
    }
    let total: f64 = (1..=t).map(|k| (t + 1 - k) as f64).sum();
    let weights: Vec<f64> = (1..=t).map(|k| (t + 1 - k) as f64 / total).collect();
    let estimate: f64 = weights
        .iter()
        .zip(betas)
        .map(|(w, b)| w * (b.exp() - 1.0))
        .sum();
    let grad = DVector::from_iterator(t, weights.iter().zip(betas).map(|(w, b)| w * b.exp()));
    let var = (grad.transpose() * vcov * &grad)[(0, 0)];
    if var < -1e-12 {
        return Err(Error::Validation(format!(
            "covariance matrix is not positive semidefinite (quadratic form {var:.3e})"
        )));
    }
    Ok((estimate, var.max(0.0).sqrt()))
}
