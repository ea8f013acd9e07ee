//! Linear instrumental-variables estimation of the structural model.
//!
//! Moment systems are built equation by equation (demand, then the price
//! equation) and solved by linear IV: the exactly identified case inverts the
//! instrument/regressor cross-moment, the over-identified case is two-stage
//! least squares with the (Z'Z)^-1 weighting. Observation weights enter every
//! cross-product; a zero-weight row cannot influence any estimate, and
//! rescaling all weights by a constant changes nothing.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::panel::{MarketId, PanelDataset, QuarterIndex};
use crate::report::EstimateReport;
use crate::structural::DENOMINATOR_TOL;

/// Per-row observation weights keyed by (market, quarter).
pub type WeightMap = BTreeMap<(MarketId, QuarterIndex), f64>;

/// One linear moment system E[Z'(y - X beta)] = 0 with row provenance.
#[derive(Debug, Clone)]
pub struct MomentSystem {
    pub outcome: Vec<f64>,
    /// Column-major regressor matrix X.
    pub regressors: Vec<Vec<f64>>,
    /// Column-major instrument matrix Z.
    pub instruments: Vec<Vec<f64>>,
    pub regressor_names: Vec<String>,
    pub instrument_names: Vec<String>,
    /// (market, quarter) label of each row; for differenced rows the quarter
    /// is the later of the pair.
    pub labels: Vec<(MarketId, QuarterIndex)>,
    /// Dense cluster index (market level).
    pub clusters: Vec<usize>,
    /// Optional non-negative per-row weights; `None` means uniform.
    pub weights: Option<Vec<f64>>,
}

impl MomentSystem {
    pub fn n_rows(&self) -> usize {
        self.outcome.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_rows();
        if n == 0 {
            return Err(Error::Validation("moment system has no rows".into()));
        }
        let k = self.regressors.len();
        let l = self.instruments.len();
        if l < k {
            return Err(Error::OrderCondition(format!(
                "{l} instruments for {k} regressors"
            )));
        }
        if let Some(w) = &self.weights {
            if w.len() != n {
                return Err(Error::Config(format!(
                    "{} weights for {n} rows",
                    w.len()
                )));
            }
            if w.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config("row weights must be non-negative".into()));
            }
            if w.iter().all(|v| *v == 0.0) {
                return Err(Error::Validation("all row weights are zero".into()));
            }
        }
        Ok(())
    }

    /// Attach per-row weights looked up from `map` by row label (missing
    /// labels get weight 1).
    pub fn with_weights(mut self, map: &WeightMap) -> Self {
        let w = self
            .labels
            .iter()
            .map(|(m, t)| map.get(&(m.clone(), *t)).copied().unwrap_or(1.0))
            .collect();
        self.weights = Some(w);
        self
    }
}

/// Row-scale a column-major matrix by sqrt(w), the algebraic equivalent of
/// weighting every cross-product.
fn scale_rows(cols: &[Vec<f64>], sqrt_w: &[f64]) -> DMatrix<f64> {
    let n = sqrt_w.len();
    DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i] * sqrt_w[i])
}

/// Solve the linear IV system. Exactly identified: beta = (Z'X)^-1 Z'y.
/// Over-identified: two-stage least squares. Cluster-robust (CR1) covariance
/// at the market level in both cases.
pub fn solve_linear_iv(sys: &MomentSystem) -> Result<EstimateReport> {
    sys.validate()?;
    let n = sys.n_rows();
    let k = sys.regressors.len();
    let l = sys.instruments.len();
    let sqrt_w: Vec<f64> = match &sys.weights {
        Some(w) => w.iter().map(|v| v.sqrt()).collect(),
        None => vec![1.0; n],
    };
    let x = scale_rows(&sys.regressors, &sqrt_w);
    let z = scale_rows(&sys.instruments, &sqrt_w);
    let y = DVector::from_iterator(n, sys.outcome.iter().zip(&sqrt_w).map(|(v, s)| v * s));

    let (beta, bread) = if l == k {
        let ztx = z.transpose() * &x;
        let bread = linalg::invert_full(&ztx, "instrument/regressor cross-moment Z'X")?;
        let beta = &bread * (z.transpose() * &y);
        (beta, bread)
    } else {
        let ztz = z.transpose() * &z;
        let ztz_inv = linalg::invert_spd(&ztz, "instrument cross-product Z'Z")?;
        // X_hat = Z (Z'Z)^-1 Z'X ; bread = (X_hat'X_hat)^-1 = (X'Z (Z'Z)^-1 Z'X)^-1.
        let ztx = z.transpose() * &x;
        let xhx = ztx.transpose() * &ztz_inv * &ztx;
        let bread = linalg::invert_spd(&xhx, "projected regressor cross-product")?;
        let beta = &bread * (ztx.transpose() * &ztz_inv * (z.transpose() * &y));
        (beta, bread)
    };

    let resid = &y - &x * &beta;
    // Score rows: instruments (exactly identified) or projected regressors.
    let score_basis = if l == k {
        z.clone()
    } else {
        let ztz = z.transpose() * &z;
        let ztz_inv = linalg::invert_spd(&ztz, "instrument cross-product Z'Z")?;
        &z * (ztz_inv * (z.transpose() * &x))
    };
    let mut scores = DMatrix::<f64>::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            scores[(i, j)] = score_basis[(i, j)] * resid[i];
        }
    }
    let vcov = linalg::cluster_vcov(&bread, &scores, &sys.clusters, k);
    let n_clusters = sys.clusters.iter().copied().max().map_or(0, |m| m + 1);
    let mut report = EstimateReport::from_parts(
        sys.regressor_names.clone(),
        beta.iter().copied().collect(),
        vcov,
        "market",
        n,
        n_clusters,
    );
    report
        .diagnostics
        .insert("n_instruments".into(), l as f64);
    report
        .diagnostics
        .insert("over_identified".into(), f64::from(l > k));
    Ok(report)
}

/// Cluster-robust first-stage F statistic for one endogenous regressor:
/// the Wald statistic on the excluded instruments in a regression of the
/// endogenous column on all instruments, divided by the number of exclusions.
///
/// Instruments numerically identical to a regressor column count as included.
/// Returns `f64::INFINITY` when the restricted covariance block is singular
/// (an effectively deterministic first stage).
pub fn first_stage_f(sys: &MomentSystem, endogenous: &str) -> Result<f64> {
    sys.validate()?;
    let e = sys
        .regressor_names
        .iter()
        .position(|n| n == endogenous)
        .ok_or_else(|| Error::Config(format!("no regressor named '{endogenous}'")))?;
    let n = sys.n_rows();
    let sqrt_w: Vec<f64> = match &sys.weights {
        Some(w) => w.iter().map(|v| v.sqrt()).collect(),
        None => vec![1.0; n],
    };
    let z = scale_rows(&sys.instruments, &sqrt_w);
    let y = DVector::from_iterator(
        n,
        sys.regressors[e].iter().zip(&sqrt_w).map(|(v, s)| v * s),
    );

    // Excluded instruments: not numerically equal to any regressor column.
    let excluded: Vec<usize> = (0..sys.instruments.len())
        .filter(|&j| {
            !sys.regressors.iter().any(|rc| {
                rc.iter()
                    .zip(&sys.instruments[j])
                    .all(|(a, b)| (a - b).abs() < 1e-12)
            })
        })
        .collect();
    if excluded.is_empty() {
        return Err(Error::Config(
            "no excluded instruments: first-stage F undefined".into(),
        ));
    }

    let ztz = z.transpose() * &z;
    let bread = linalg::invert_spd(&ztz, "first-stage instrument cross-product")?;
    let beta = &bread * (z.transpose() * &y);
    let resid = &y - &z * &beta;
    if resid.amax() < 1e-12 {
        return Ok(f64::INFINITY);
    }
    let l = z.ncols();
    let mut scores = DMatrix::<f64>::zeros(n, l);
    for i in 0..n {
        for j in 0..l {
            scores[(i, j)] = z[(i, j)] * resid[i];
        }
    }
    let vcov = linalg::cluster_vcov(&bread, &scores, &sys.clusters, l);
    let q = excluded.len();
    let b_r = DVector::from_iterator(q, excluded.iter().map(|&j| beta[j]));
    let v_rr = DMatrix::from_fn(q, q, |i, j| vcov[(excluded[i], excluded[j])]);
    match linalg::invert_spd(&v_rr, "restricted first-stage covariance") {
        Ok(inv) => Ok(((b_r.transpose() * inv * &b_r)[(0, 0)] / q as f64).max(0.0)),
        Err(_) => Ok(f64::INFINITY),
    }
}

/// Demand moment system: Q on [1, P, Z] instrumented by [1, W, Z]; the cost
/// shifters W identify the price slope.
pub fn build_demand_moments(data: &PanelDataset) -> Result<MomentSystem> {
    let obs = data.observations();
    let n = obs.len();
    let (p, q) = (data.z_dim(), data.w_dim());
    if q == 0 {
        return Err(Error::OrderCondition(
            "demand estimation needs at least one cost shifter to instrument price".into(),
        ));
    }
    let mut regressors = vec![vec![1.0; n], Vec::with_capacity(n)];
    let mut regressor_names = vec!["const".to_string(), "alpha1".to_string()];
    for j in 0..p {
        regressors.push(Vec::with_capacity(n));
        regressor_names.push(format!("z_{}", j + 1));
    }
    let mut instruments = vec![vec![1.0; n]];
    let mut instrument_names = vec!["const".to_string()];
    for j in 0..q {
        instruments.push(Vec::with_capacity(n));
        instrument_names.push(format!("w_{}", j + 1));
    }
    for j in 0..p {
        instruments.push(Vec::with_capacity(n));
        instrument_names.push(format!("z_{}", j + 1));
    }
    let mut outcome = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for o in obs {
        outcome.push(o.quantity);
        regressors[1].push(o.price);
        for j in 0..p {
            regressors[2 + j].push(o.z[j]);
            instruments[1 + q + j].push(o.z[j]);
        }
        for j in 0..q {
            instruments[1 + j].push(o.w[j]);
        }
        labels.push((o.market.clone(), o.quarter));
    }
    let clusters = linalg::dense_groups(
        &obs.iter().map(|o| o.market.clone()).collect::<Vec<_>>(),
    );
    Ok(MomentSystem {
        outcome,
        regressors,
        instruments,
        regressor_names,
        instrument_names,
        labels,
        clusters,
        weights: None,
    })
}

/// Post-merger cost-change parameterization for the price equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EfficiencySpec {
    /// One level shift theta3 * I.
    Scalar,
    /// Per-quarter increments theta3_k over a post window of this length.
    Quarterly(usize),
}

impl EfficiencySpec {
    pub fn horizon(&self) -> usize {
        match self {
            EfficiencySpec::Scalar => 1,
            EfficiencySpec::Quarterly(t) => *t,
        }
    }
}

/// Estimating form of the price equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupplyForm {
    /// Market-demeaned levels with pre/post quantity slopes.
    FixedEffects,
    /// First differences with regime-specific quantity slopes and transition
    /// dummies.
    FirstDifference,
}

/// Price-equation moment system.
///
/// Fixed-effects form: within-market demeaned levels of P on
/// {Q*(1-I), Q*I, W, efficiency dummies}, instrumented by
/// {Z*(1-I), Z*I, W, efficiency dummies}. Weighted demeaning when row
/// weights are supplied, so zero-weight rows cannot leak into group means.
///
/// First-difference form: delta-P on regime-interacted delta-Q (control,
/// treated-pre, treated-post), the lagged quantity at the merger transition
/// (which carries the conduct change), delta-W, and per-quarter transition
/// dummies whose coefficients are the efficiency increments.
pub fn build_supply_moments(
    data: &PanelDataset,
    form: SupplyForm,
    efficiency: EfficiencySpec,
    weights: Option<&WeightMap>,
) -> Result<MomentSystem> {
    if data.z_dim() == 0 {
        return Err(Error::OrderCondition(
            "price-equation estimation needs at least one demand shifter to instrument quantity"
                .into(),
        ));
    }
    match form {
        SupplyForm::FixedEffects => build_supply_fe(data, efficiency, weights),
        SupplyForm::FirstDifference => build_supply_fd(data, efficiency, weights),
    }
}

fn efficiency_horizon_check(data: &PanelDataset, efficiency: EfficiencySpec) -> Result<()> {
    if let EfficiencySpec::Quarterly(t) = efficiency {
        if t < 1 {
            return Err(Error::Config("efficiency horizon must be >= 1".into()));
        }
        let max_q = *data.quarters().last().unwrap();
        if data.plan.merger_quarter + t as i64 - 1 > max_q {
            return Err(Error::Validation(format!(
                "efficiency horizon {t} exceeds available post-merger quarters"
            )));
        }
    }
    Ok(())
}

fn build_supply_fe(
    data: &PanelDataset,
    efficiency: EfficiencySpec,
    weights: Option<&WeightMap>,
) -> Result<MomentSystem> {
    efficiency_horizon_check(data, efficiency)?;
    let obs = data.observations();
    let n = obs.len();
    let (p, q) = (data.z_dim(), data.w_dim());

    let mut outcome = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut g_pre = Vec::with_capacity(n);
    let mut g_post = Vec::with_capacity(n);
    let mut w_cols = vec![Vec::with_capacity(n); q];
    let mut z_pre = vec![Vec::with_capacity(n); p];
    let mut z_post = vec![Vec::with_capacity(n); p];
    let horizon = efficiency.horizon();
    let mut eff_cols = vec![Vec::with_capacity(n); horizon];
    let mut row_w = Vec::with_capacity(n);
    for o in obs {
        let treated_post =
            data.plan.is_treated(&o.market) && o.quarter >= data.plan.merger_quarter;
        let i_mt = f64::from(treated_post);
        outcome.push(o.price);
        labels.push((o.market.clone(), o.quarter));
        g_pre.push(o.quantity * (1.0 - i_mt));
        g_post.push(o.quantity * i_mt);
        for j in 0..q {
            w_cols[j].push(o.w[j]);
        }
        for j in 0..p {
            z_pre[j].push(o.z[j] * (1.0 - i_mt));
            z_post[j].push(o.z[j] * i_mt);
        }
        let step = if treated_post {
            data.plan.event_step(o.quarter)
        } else {
            0
        };
        match efficiency {
            EfficiencySpec::Scalar => eff_cols[0].push(i_mt),
            // At-least-k indicators: coefficient k is the k-th increment of
            // the cumulative cost change.
            EfficiencySpec::Quarterly(t) => {
                for k in 1..=t {
                    eff_cols[k - 1].push(f64::from(step >= k as i64));
                }
            }
        }
        row_w.push(match weights {
            Some(map) => *map.get(&(o.market.clone(), o.quarter)).unwrap_or(&1.0),
            None => 1.0,
        });
    }

    let mut regressors = vec![g_pre, g_post];
    let mut regressor_names = vec!["gamma_pre".to_string(), "gamma_post".to_string()];
    let mut instruments = Vec::new();
    let mut instrument_names = Vec::new();
    for (j, col) in z_pre.into_iter().enumerate() {
        instruments.push(col);
        instrument_names.push(format!("z_{}_pre", j + 1));
    }
    for (j, col) in z_post.into_iter().enumerate() {
        instruments.push(col);
        instrument_names.push(format!("z_{}_post", j + 1));
    }
    for (j, col) in w_cols.into_iter().enumerate() {
        regressors.push(col.clone());
        regressor_names.push(format!("w_{}", j + 1));
        instruments.push(col);
        instrument_names.push(format!("w_{}", j + 1));
    }
    for (k, col) in eff_cols.into_iter().enumerate() {
        regressors.push(col.clone());
        instruments.push(col);
        let name = match efficiency {
            EfficiencySpec::Scalar => "theta3".to_string(),
            EfficiencySpec::Quarterly(_) => format!("theta3_{}", k + 1),
        };
        regressor_names.push(name.clone());
        instrument_names.push(name);
    }

    // Weighted within-market demeaning of outcome, regressors, instruments.
    let groups = linalg::dense_groups(
        &obs.iter().map(|o| o.market.clone()).collect::<Vec<_>>(),
    );
    let demean = |col: &mut Vec<f64>| {
        let g_max = groups.iter().copied().max().map_or(0, |m| m + 1);
        let mut sw = vec![0.0; g_max];
        let mut swx = vec![0.0; g_max];
        for (i, &g) in groups.iter().enumerate() {
            sw[g] += row_w[i];
            swx[g] += row_w[i] * col[i];
        }
        for (i, &g) in groups.iter().enumerate() {
            if sw[g] > 0.0 {
                col[i] -= swx[g] / sw[g];
            }
        }
    };
    demean(&mut outcome);
    for col in regressors.iter_mut().chain(instruments.iter_mut()) {
        demean(col);
    }

    Ok(MomentSystem {
        outcome,
        regressors,
        instruments,
        regressor_names,
        instrument_names,
        labels,
        clusters: groups,
        weights: weights.map(|_| row_w),
    })
}

fn build_supply_fd(
    data: &PanelDataset,
    efficiency: EfficiencySpec,
    weights: Option<&WeightMap>,
) -> Result<MomentSystem> {
    efficiency_horizon_check(data, efficiency)?;
    let obs = data.observations();
    let (p, q) = (data.z_dim(), data.w_dim());
    let merger = data.plan.merger_quarter;
    let horizon = efficiency.horizon();

    let mut outcome = Vec::new();
    let mut labels = Vec::new();
    let mut clusters = Vec::new();
    let mut row_w = Vec::new();
    let mut dq_ctrl = Vec::new();
    let mut dq_pre = Vec::new();
    let mut dq_post = Vec::new();
    let mut q_lag_trans = Vec::new();
    let mut dw_cols = vec![Vec::new(); q];
    let mut trans_cols = vec![Vec::new(); horizon];
    let mut dz_ctrl = vec![Vec::new(); p];
    let mut dz_pre = vec![Vec::new(); p];
    let mut dz_post = vec![Vec::new(); p];
    let mut z_lag_trans = vec![Vec::new(); p];

    let market_groups = linalg::dense_groups(
        &obs.iter().map(|o| o.market.clone()).collect::<Vec<_>>(),
    );
    for i in 1..obs.len() {
        let (prev, cur) = (&obs[i - 1], &obs[i]);
        if cur.market != prev.market || cur.quarter != prev.quarter + 1 {
            continue;
        }
        let treated = data.plan.is_treated(&cur.market);
        let post = treated && cur.quarter >= merger;
        let pre = treated && !post;
        let crossing = treated && cur.quarter == merger;
        outcome.push(cur.price - prev.price);
        labels.push((cur.market.clone(), cur.quarter));
        clusters.push(market_groups[i]);
        let dq = cur.quantity - prev.quantity;
        dq_ctrl.push(if treated { 0.0 } else { dq });
        dq_pre.push(if pre { dq } else { 0.0 });
        dq_post.push(if post { dq } else { 0.0 });
        q_lag_trans.push(if crossing { prev.quantity } else { 0.0 });
        for j in 0..q {
            dw_cols[j].push(cur.w[j] - prev.w[j]);
        }
        for j in 0..p {
            let dz = cur.z[j] - prev.z[j];
            dz_ctrl[j].push(if treated { 0.0 } else { dz });
            dz_pre[j].push(if pre { dz } else { 0.0 });
            dz_post[j].push(if post { dz } else { 0.0 });
            z_lag_trans[j].push(if crossing { prev.z[j] } else { 0.0 });
        }
        let step = data.plan.event_step(cur.quarter);
        for k in 1..=horizon {
            trans_cols[k - 1].push(f64::from(treated && step == k as i64));
        }
        row_w.push(match weights {
            Some(map) => *map.get(&(cur.market.clone(), cur.quarter)).unwrap_or(&1.0),
            None => 1.0,
        });
    }
    if outcome.is_empty() {
        return Err(Error::Validation("no differenced observations".into()));
    }

    let mut regressors = vec![dq_ctrl, dq_pre, dq_post, q_lag_trans];
    let mut regressor_names = vec![
        "gamma_ctrl".to_string(),
        "gamma_pre".to_string(),
        "gamma_post".to_string(),
        "q_lag_transition".to_string(),
    ];
    let mut instruments = Vec::new();
    let mut instrument_names = Vec::new();
    for (label, block) in [("ctrl", dz_ctrl), ("pre", dz_pre), ("post", dz_post)] {
        for (j, col) in block.into_iter().enumerate() {
            instruments.push(col);
            instrument_names.push(format!("dz_{}_{label}", j + 1));
        }
    }
    for (j, col) in z_lag_trans.into_iter().enumerate() {
        instruments.push(col);
        instrument_names.push(format!("z_lag_transition_{}", j + 1));
    }
    for (j, col) in dw_cols.into_iter().enumerate() {
        regressors.push(col.clone());
        regressor_names.push(format!("dw_{}", j + 1));
        instruments.push(col);
        instrument_names.push(format!("dw_{}", j + 1));
    }
    for (k, col) in trans_cols.into_iter().enumerate() {
        regressors.push(col.clone());
        instruments.push(col);
        let name = match efficiency {
            EfficiencySpec::Scalar => "theta3".to_string(),
            EfficiencySpec::Quarterly(_) => format!("theta3_{}", k + 1),
        };
        regressor_names.push(name.clone());
        instrument_names.push(name);
    }

    Ok(MomentSystem {
        outcome,
        regressors,
        instruments,
        regressor_names,
        instrument_names,
        labels,
        clusters,
        weights: weights.map(|_| row_w),
    })
}

/// Full structural estimation specification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructuralSpec {
    pub supply_form: SupplyForm,
    pub efficiency: EfficiencySpec,
}

impl Default for StructuralSpec {
    fn default() -> Self {
        StructuralSpec {
            supply_form: SupplyForm::FixedEffects,
            efficiency: EfficiencySpec::Scalar,
        }
    }
}

/// Demand and price-equation estimates with the derived policy quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralEstimate {
    pub demand: EstimateReport,
    pub supply: EstimateReport,
    /// Conduct change -alpha1 * (gamma_post - gamma_pre), delta-method SE.
    pub delta_lambda: f64,
    pub delta_lambda_se: f64,
    /// Post-window average cost change, weighting the k-th increment by its
    /// remaining quarters.
    pub average_efficiency: f64,
    pub average_efficiency_se: f64,
    /// Equilibrium price response avg_efficiency / (1 - gamma_post * alpha1).
    pub efficiency_price_effect: f64,
    pub efficiency_price_effect_se: f64,
    /// Cluster-robust first-stage F for price in the demand equation.
    pub demand_first_stage_f: f64,
}

/// Estimate demand, then the price equation, then assemble the conduct
/// change, average efficiency, and its equilibrium price effect with
/// delta-method standard errors (demand and supply blocks treated as
/// independent).
pub fn estimate_structural(data: &PanelDataset, spec: &StructuralSpec) -> Result<StructuralEstimate> {
    let demand_sys = build_demand_moments(data)?;
    estimate_structural_from_systems(
        &demand_sys,
        &build_supply_moments(data, spec.supply_form, spec.efficiency, None)?,
        spec,
    )
}

/// Same as [`estimate_structural`] but on caller-supplied (possibly
/// reweighted) moment systems.
pub fn estimate_structural_from_systems(
    demand_sys: &MomentSystem,
    supply_sys: &MomentSystem,
    spec: &StructuralSpec,
) -> Result<StructuralEstimate> {
    let demand = solve_linear_iv(demand_sys)?;
    let demand_first_stage_f = first_stage_f(demand_sys, "alpha1")?;
    let supply = solve_linear_iv(supply_sys)?;

    let alpha1 = demand.coefficient("alpha1")?;
    let i_a = demand.position("alpha1")?;
    let va = demand.vcov[i_a][i_a];
    let gamma_pre = supply.coefficient("gamma_pre")?;
    let gamma_post = supply.coefficient("gamma_post")?;
    let sv = supply.vcov_matrix();
    let i_pre = supply.position("gamma_pre")?;
    let i_post = supply.position("gamma_post")?;

    // delta_lambda = -alpha1 * (gamma_post - gamma_pre).
    let dgamma = gamma_post - gamma_pre;
    let delta_lambda = -alpha1 * dgamma;
    let var_dl = dgamma * dgamma * va
        + alpha1 * alpha1
            * (sv[(i_post, i_post)] + sv[(i_pre, i_pre)] - 2.0 * sv[(i_pre, i_post)]);
    let delta_lambda_se = var_dl.max(0.0).sqrt();

    // Average efficiency over the post window.
    let (eff_idx, eff_weights): (Vec<usize>, Vec<f64>) = match spec.efficiency {
        EfficiencySpec::Scalar => (vec![supply.position("theta3")?], vec![1.0]),
        EfficiencySpec::Quarterly(t) => {
            let idx = (1..=t)
                .map(|k| supply.position(&format!("theta3_{k}")))
                .collect::<Result<Vec<_>>>()?;
            let tf = t as f64;
            let w = (1..=t).map(|k| (tf + 1.0 - k as f64) / tf).collect();
            (idx, w)
        }
    };
    let average_efficiency: f64 = eff_idx
        .iter()
        .zip(&eff_weights)
        .map(|(&i, w)| w * supply.coefficients[i])
        .sum();
    let mut var_eff = 0.0;
    for (a, &ia) in eff_idx.iter().enumerate() {
        for (b, &ib) in eff_idx.iter().enumerate() {
            var_eff += eff_weights[a] * eff_weights[b] * sv[(ia, ib)];
        }
    }
    let average_efficiency_se = var_eff.max(0.0).sqrt();

    // Price effect = avg_eff / D with D = 1 - gamma_post * alpha1.
    let denom = 1.0 - gamma_post * alpha1;
    if denom.abs() < DENOMINATOR_TOL {
        return Err(Error::SingularDenominator(denom));
    }
    let efficiency_price_effect = average_efficiency / denom;
    // Supply-block gradient: efficiency coefficients and gamma_post are
    // jointly distributed; alpha1 contributes through the demand block.
    let k_s = supply.coefficients.len();
    let mut grad_s = DVector::<f64>::zeros(k_s);
    for (a, &ia) in eff_idx.iter().enumerate() {
        grad_s[ia] += eff_weights[a] / denom;
    }
    grad_s[i_post] += average_efficiency * alpha1 / (denom * denom);
    let var_pe_supply = (grad_s.transpose() * &sv * &grad_s)[(0, 0)];
    let d_alpha = average_efficiency * gamma_post / (denom * denom);
    let var_pe = var_pe_supply + d_alpha * d_alpha * va;
    let efficiency_price_effect_se = var_pe.max(0.0).sqrt();

    Ok(StructuralEstimate {
        demand,
        supply,
        delta_lambda,
        delta_lambda_se,
        average_efficiency,
        average_efficiency_se,
        efficiency_price_effect,
        efficiency_price_effect_se,
        demand_first_stage_f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{MarketId, Observation, PanelDataset, PanelMetadata, TreatmentPlan};
    use approx::assert_abs_diff_eq;

    fn system(
        outcome: Vec<f64>,
        regressors: Vec<Vec<f64>>,
        instruments: Vec<Vec<f64>>,
        clusters: Vec<usize>,
    ) -> MomentSystem {
        let n = outcome.len();
        MomentSystem {
            regressor_names: (0..regressors.len()).map(|j| format!("b{j}")).collect(),
            instrument_names: (0..instruments.len()).map(|j| format!("i{j}")).collect(),
            labels: (0..n).map(|i| (MarketId::new("m"), i as i64)).collect(),
            outcome,
            regressors,
            instruments,
            clusters,
            weights: None,
        }
    }

    #[test]
    fn exactly_identified_matches_closed_form() {
        // y = 2 + 3x, x instrumented by itself and a constant (OLS special case).
        let x = vec![0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 + 3.0 * v).collect();
        let ones = vec![1.0; 4];
        let sys = system(
            y,
            vec![ones.clone(), x.clone()],
            vec![ones, x],
            vec![0, 1, 2, 3],
        );
        let r = solve_linear_iv(&sys).unwrap();
        assert_abs_diff_eq!(r.coefficients[0], 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(r.coefficients[1], 3.0, epsilon = 1e-10);
    }

    #[test]
    fn order_condition_enforced() {
        let sys = system(
            vec![1.0, 2.0, 3.0],
            vec![vec![1.0; 3], vec![0.0, 1.0, 2.0]],
            vec![vec![1.0; 3]],
            vec![0, 1, 2],
        );
        assert!(matches!(
            solve_linear_iv(&sys),
            Err(Error::OrderCondition(_))
        ));
    }

    #[test]
    fn weight_scale_invariance_and_zero_row_locality() {
        let x = vec![0.5, 1.0, 2.0, 3.0, 4.0, 5.5];
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| 1.0 + 2.0 * v + if i == 5 { 100.0 } else { 0.01 * i as f64 }).collect();
        let ones = vec![1.0; 6];
        let base = system(
            y.clone(),
            vec![ones.clone(), x.clone()],
            vec![ones.clone(), x.clone()],
            vec![0, 0, 1, 1, 2, 2],
        );
        // Zero weight on the contaminated row = dropping it.
        let mut w_zero = base.clone();
        w_zero.weights = Some(vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
        let mut dropped = system(
            y[..5].to_vec(),
            vec![ones[..5].to_vec(), x[..5].to_vec()],
            vec![ones[..5].to_vec(), x[..5].to_vec()],
            vec![0, 0, 1, 1, 2],
        );
        dropped.labels.truncate(5);
        let rz = solve_linear_iv(&w_zero).unwrap();
        let rd = solve_linear_iv(&dropped).unwrap();
        assert_abs_diff_eq!(rz.coefficients[1], rd.coefficients[1], epsilon = 1e-10);

        // Scaling all weights by 7 changes nothing.
        let mut w1 = base.clone();
        w1.weights = Some(vec![0.3, 1.0, 2.0, 0.5, 1.5, 0.7]);
        let mut w7 = base.clone();
        w7.weights = Some(vec![2.1, 7.0, 14.0, 3.5, 10.5, 4.9]);
        let r1 = solve_linear_iv(&w1).unwrap();
        let r7 = solve_linear_iv(&w7).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(r1.coefficients[j], r7.coefficients[j], epsilon = 1e-12);
            assert_abs_diff_eq!(r1.se[j], r7.se[j], epsilon = 1e-10);
        }
    }

    #[test]
    fn negative_weights_rejected() {
        let sys = {
            let mut s = system(
                vec![1.0, 2.0],
                vec![vec![1.0, 1.0]],
                vec![vec![1.0, 1.0]],
                vec![0, 1],
            );
            s.weights = Some(vec![1.0, -0.5]);
            s
        };
        assert!(solve_linear_iv(&sys).is_err());
    }

    /// Noiseless structural panel: demand and supply coefficients, the
    /// conduct change, and the efficiency pass-through are all recovered to
    /// numerical precision.
    #[test]
    fn noiseless_panel_recovers_structural_parameters() {
        use crate::structural::{
            equilibrium, nuisance_slope, DemandParams, MarketConditions, SupplyParams, Theta3,
        };
        let d = DemandParams {
            alpha0: 9.224,
            alpha1: -3.112,
            alpha2: vec![0.5],
        };
        let s = SupplyParams {
            theta0: 1.657,
            theta1: 0.05,
            theta2: vec![0.3],
            theta3: Theta3::Scalar(0.134),
        };
        let (l_pre, l_post) = (0.2, 0.307);
        let g_pre = nuisance_slope(s.theta1, l_pre, d.alpha1).unwrap();
        let g_post = nuisance_slope(s.theta1, l_post, d.alpha1).unwrap();

        let merger = 4;
        let mut obs = Vec::new();
        let mut treated_ids = Vec::new();
        // Deterministic exogenous variation.
        for m in 0..30 {
            let treated = m % 3 == 0;
            let id = MarketId::new(format!("m{m:02}"));
            if treated {
                treated_ids.push(id.clone());
            }
            for t in 0..8i64 {
                let z = ((m * 7 + t as usize * 13) % 11) as f64 / 11.0 - 0.4;
                let w = ((m * 5 + t as usize * 3) % 7) as f64 / 7.0 - 0.3;
                let post = treated && t >= merger;
                let gamma = if post { g_post } else { g_pre };
                let mc = MarketConditions {
                    z: &[z],
                    w: &[w],
                    phi: 0.0,
                    vartheta: 0.0,
                    efficiency: if post { 0.134 } else { 0.0 },
                };
                let (price, quantity) = equilibrium(&d, &s, gamma, &mc).unwrap();
                obs.push(Observation {
                    market: id.clone(),
                    quarter: t,
                    price,
                    quantity,
                    seats: None,
                    z: vec![z],
                    w: vec![w],
                    x: vec![],
                });
            }
        }
        let data = PanelDataset::new(
            obs,
            TreatmentPlan::new(merger, treated_ids),
            PanelMetadata::default(),
        )
        .unwrap();
        let est = estimate_structural(&data, &StructuralSpec::default()).unwrap();
        assert_abs_diff_eq!(est.demand.coefficient("alpha1").unwrap(), d.alpha1, epsilon = 1e-8);
        assert_abs_diff_eq!(est.demand.coefficient("const").unwrap(), d.alpha0, epsilon = 1e-7);
        assert_abs_diff_eq!(est.supply.coefficient("gamma_pre").unwrap(), g_pre, epsilon = 1e-8);
        assert_abs_diff_eq!(est.supply.coefficient("gamma_post").unwrap(), g_post, epsilon = 1e-8);
        assert_abs_diff_eq!(est.supply.coefficient("theta3").unwrap(), 0.134, epsilon = 1e-8);
        assert_abs_diff_eq!(est.delta_lambda, l_post - l_pre, epsilon = 1e-8);
        assert_abs_diff_eq!(est.average_efficiency, 0.134, epsilon = 1e-8);
        let denom = 1.0 - g_post * d.alpha1;
        assert_abs_diff_eq!(est.efficiency_price_effect, 0.134 / denom, epsilon = 1e-8);
        assert!(est.demand_first_stage_f > 10.0, "F = {}", est.demand_first_stage_f);

        // First-difference form recovers the same structure.
        let spec_fd = StructuralSpec {
            supply_form: SupplyForm::FirstDifference,
            efficiency: EfficiencySpec::Scalar,
        };
        let est_fd = estimate_structural(&data, &spec_fd).unwrap();
        assert_abs_diff_eq!(est_fd.supply.coefficient("gamma_post").unwrap(), g_post, epsilon = 1e-7);
        assert_abs_diff_eq!(est_fd.supply.coefficient("gamma_pre").unwrap(), g_pre, epsilon = 1e-7);
        assert_abs_diff_eq!(est_fd.delta_lambda, l_post - l_pre, epsilon = 1e-7);
        assert_abs_diff_eq!(est_fd.supply.coefficient("theta3").unwrap(), 0.134, epsilon = 1e-7);
        // The lagged-quantity transition coefficient is gamma_post - gamma_pre.
        assert_abs_diff_eq!(
            est_fd.supply.coefficient("q_lag_transition").unwrap(),
            g_post - g_pre,
            epsilon = 1e-7
        );
    }

    #[test]
    fn quarterly_efficiency_increments_recovered() {
        use crate::structural::{
            equilibrium, nuisance_slope, DemandParams, MarketConditions, SupplyParams, Theta3,
        };
        let d = DemandParams {
            alpha0: 9.224,
            alpha1: -3.112,
            alpha2: vec![0.5],
        };
        let incr = vec![0.05, 0.03, 0.02, 0.01];
        let s = SupplyParams {
            theta0: 1.657,
            theta1: 0.05,
            theta2: vec![0.3],
            theta3: Theta3::Quarterly(incr.clone()),
        };
        let gamma = nuisance_slope(s.theta1, 0.2, d.alpha1).unwrap();
        let merger = 4;
        let mut obs = Vec::new();
        let mut treated_ids = Vec::new();
        for m in 0..30 {
            let treated = m % 3 == 0;
            let id = MarketId::new(format!("m{m:02}"));
            if treated {
                treated_ids.push(id.clone());
            }
            for t in 0..8i64 {
                let z = ((m * 7 + t as usize * 13) % 11) as f64 / 11.0 - 0.4;
                let w = ((m * 5 + t as usize * 3) % 7) as f64 / 7.0 - 0.3;
                let step = if treated { (t - merger + 1).max(0) } else { 0 };
                let mc = MarketConditions {
                    z: &[z],
                    w: &[w],
                    phi: 0.0,
                    vartheta: 0.0,
                    efficiency: s.theta3.cumulative(step),
                };
                let (price, quantity) = equilibrium(&d, &s, gamma, &mc).unwrap();
                obs.push(Observation {
                    market: id.clone(),
                    quarter: t,
                    price,
                    quantity,
                    seats: None,
                    z: vec![z],
                    w: vec![w],
                    x: vec![],
                });
            }
        }
        let data = PanelDataset::new(
            obs,
            TreatmentPlan::new(merger, treated_ids),
            PanelMetadata::default(),
        )
        .unwrap();
        for form in [SupplyForm::FixedEffects, SupplyForm::FirstDifference] {
            let spec = StructuralSpec {
                supply_form: form,
                efficiency: EfficiencySpec::Quarterly(4),
            };
            let est = estimate_structural(&data, &spec).unwrap();
            for (k, v) in incr.iter().enumerate() {
                assert_abs_diff_eq!(
                    est.supply.coefficient(&format!("theta3_{}", k + 1)).unwrap(),
                    *v,
                    epsilon = 1e-7
                );
            }
            // Equal remaining-quarter weighting of the increments.
            let expected: f64 = incr
                .iter()
                .enumerate()
                .map(|(i, v)| v * (4.0 - i as f64) / 4.0)
                .sum();
            assert_abs_diff_eq!(est.average_efficiency, expected, epsilon = 1e-7);
        }
    }

    #[test]
    fn first_stage_f_requires_excluded_instruments() {
        let x = vec![0.0, 1.0, 2.0, 3.0];
        let ones = vec![1.0; 4];
        let sys = system(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![ones.clone(), x.clone()],
            vec![ones, x],
            vec![0, 1, 2, 3],
        );
        assert!(first_stage_f(&sys, "b1").is_err());
    }
}
