//! Synthetic-control weighting of the structural moment systems, the
//! weighted difference-in-differences treatment effect, and block-bootstrap
//! inference.
//!
//! Each observation's weight is the product of its market weight (solved
//! synthetic-control weight for controls, 1 for treated markets) and its time
//! weight (solved pre-period weight for pre-merger quarters, 1 post-merger).
//! With all weights equal to one, every estimate reduces to its unweighted
//! counterpart exactly. Inference resamples whole markets with replacement,
//! stratified by treatment status, re-solving the weights inside every
//! replicate.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{
    build_demand_moments, build_supply_moments, estimate_structural_from_systems,
    StructuralEstimate, StructuralSpec, WeightMap,
};
use crate::panel::{MarketId, PanelDataset};
use crate::weights::{residualize, solve_sdid_weights_from_block, ResidualizedBlock, SdidWeights};

/// Expand solved weights into a per-(market, quarter) map:
/// w_mt = (omega_m for controls, 1 for treated) * (tau_t pre-merger, 1 post).
pub fn synthetic_weight_map(data: &PanelDataset, w: &SdidWeights) -> WeightMap {
    let mut map = WeightMap::new();
    for o in data.observations() {
        let market_w = w.market_weights.get(&o.market).copied().unwrap_or(1.0);
        let time_w = w.time_weights.get(&o.quarter).copied().unwrap_or(1.0);
        map.insert((o.market.clone(), o.quarter), market_w * time_w);
    }
    map
}

/// Structural estimate under synthetic-control observation weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGmmEstimate {
    pub weights: SdidWeights,
    pub structural: StructuralEstimate,
}

/// Solve the weights, reweight both moment systems, and estimate the
/// structural model. `zeta = None` uses the data-driven ridge scale.
pub fn estimate_synthetic_gmm(
    data: &PanelDataset,
    spec: &StructuralSpec,
    zeta: Option<f64>,
) -> Result<SyntheticGmmEstimate> {
    let block = residualize(data)?;
    let weights = solve_sdid_weights_from_block(&block, zeta)?;
    let map = synthetic_weight_map(data, &weights);
    let demand = build_demand_moments(data)?.with_weights(&map);
    let supply = build_supply_moments(data, spec.supply_form, spec.efficiency, Some(&map))?;
    let structural = estimate_structural_from_systems(&demand, &supply, spec)?;
    Ok(SyntheticGmmEstimate { weights, structural })
}

/// Synthetic-DiD treatment effect on residualized prices:
/// (treated post mean - tau-weighted treated pre mean)
/// - (omega-weighted control post mean - omega- and tau-weighted control pre).
pub fn sdid_effect_from_block(block: &ResidualizedBlock, w: &SdidWeights) -> Result<f64> {
    let omega: Vec<f64> = block
        .control_markets
        .iter()
        .map(|m| {
            w.market_weights
                .get(m)
                .copied()
                .ok_or_else(|| Error::Config(format!("no market weight for control {m}")))
        })
        .collect::<Result<_>>()?;
    let tau: Vec<f64> = block
        .pre_quarters
        .iter()
        .map(|t| {
            w.time_weights
                .get(t)
                .copied()
                .ok_or_else(|| Error::Config(format!("no time weight for pre quarter {t}")))
        })
        .collect::<Result<_>>()?;

    let n_tr = block.treated_markets.len() as f64;
    let treated_post = block.treated_post_mean.iter().sum::<f64>() / n_tr;
    let treated_pre: f64 = tau
        .iter()
        .zip(&block.treated_pre_mean)
        .map(|(t, y)| t * y)
        .sum();
    let control_post: f64 = omega
        .iter()
        .zip(&block.control_post_mean)
        .map(|(o, y)| o * y)
        .sum();
    let mut control_pre = 0.0;
    for (i, o) in omega.iter().enumerate() {
        for (j, t) in tau.iter().enumerate() {
            control_pre += o * t * block.control_pre[(i, j)];
        }
    }
    Ok((treated_post - treated_pre) - (control_post - control_pre))
}

/// Solve weights and compute the synthetic-DiD effect in one step.
pub fn sdid_treatment_effect(data: &PanelDataset, zeta: Option<f64>) -> Result<f64> {
    let block = residualize(data)?;
    let weights = solve_sdid_weights_from_block(&block, zeta)?;
    sdid_effect_from_block(&block, &weights)
}

/// Block-bootstrap settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_replicates() -> usize {
    200
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: default_replicates(),
            seed: 0,
        }
    }
}

/// Point estimate with bootstrap spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub point: f64,
    pub se: f64,
    pub replicates_used: usize,
    pub replicates_failed: usize,
    /// Successful replicate draws, in replicate order.
    pub draws: Vec<f64>,
}

/// Resample whole markets with replacement, stratified by treatment status;
/// each draw keeps its full time series, and repeated draws get fresh unique
/// identifiers.
pub fn resample_markets(data: &PanelDataset, rng: &mut impl Rng) -> Result<PanelDataset> {
    let markets = data.markets();
    let (treated_pool, control_pool): (Vec<_>, Vec<_>) = markets
        .into_iter()
        .partition(|m| data.plan.is_treated(m));

    let mut observations = Vec::with_capacity(data.n_obs());
    let mut treated = Vec::new();
    let mut draw_pool = |pool: &[MarketId], out_treated: Option<&mut Vec<MarketId>>| {
        let mut out_treated = out_treated;
        for k in 0..pool.len() {
            let pick = &pool[rng.gen_range(0..pool.len())];
            let new_id = MarketId::new(format!("{pick}#b{k}"));
            if let Some(list) = out_treated.as_deref_mut() {
                list.push(new_id.clone());
            }
            for o in data.observations() {
                if &o.market == pick {
                    let mut o = o.clone();
                    o.market = new_id.clone();
                    observations.push(o);
                }
            }
        }
    };
    draw_pool(&treated_pool, Some(&mut treated));
    draw_pool(&control_pool, None);

    let mut plan = data.plan.clone();
    plan.treated_markets = treated.into_iter().collect();
    PanelDataset::new(observations, plan, data.metadata.clone())
}

/// Bootstrap any scalar statistic of the panel. Replicate `b` uses an
/// independent RNG stream derived from the seed, so results are reproducible
/// and order-independent. Errors if more than 10% of replicates fail.
pub fn block_bootstrap<F>(
    data: &PanelDataset,
    cfg: &BootstrapConfig,
    stat: F,
) -> Result<BootstrapSummary>
where
    F: Fn(&PanelDataset) -> Result<f64>,
{
    if cfg.replicates < 2 {
        return Err(Error::Config("bootstrap needs at least 2 replicates".into()));
    }
    let point = stat(data)?;
    let mut draws = Vec::with_capacity(cfg.replicates);
    let mut failed = 0usize;
    for b in 0..cfg.replicates {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(b as u64 + 1);
        let resampled = resample_markets(data, &mut rng)?;
        match stat(&resampled) {
            Ok(v) if v.is_finite() => draws.push(v),
            _ => failed += 1,
        }
    }
    if failed * 10 > cfg.replicates {
        return Err(Error::BootstrapAttrition {
            failed,
            total: cfg.replicates,
        });
    }
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(BootstrapSummary {
        point,
        se: var.sqrt(),
        replicates_used: draws.len(),
        replicates_failed: failed,
        draws,
    })
}

/// Synthetic-DiD effect with block-bootstrap standard error; the weights are
/// re-solved inside every replicate.
pub fn sdid_with_bootstrap(
    data: &PanelDataset,
    zeta: Option<f64>,
    cfg: &BootstrapConfig,
) -> Result<BootstrapSummary> {
    block_bootstrap(data, cfg, |d| sdid_treatment_effect(d, zeta))
}

/// Conduct change from the synthetic-GMM estimator with block-bootstrap
/// standard error.
pub fn delta_lambda_with_bootstrap(
    data: &PanelDataset,
    spec: &StructuralSpec,
    zeta: Option<f64>,
    cfg: &BootstrapConfig,
) -> Result<BootstrapSummary> {
    block_bootstrap(data, cfg, |d| {
        Ok(estimate_synthetic_gmm(d, spec, zeta)?.structural.delta_lambda)
    })
}
