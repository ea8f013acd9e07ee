//! Panel simulator for the structural model, with a Monte Carlo driver.
//!
//! Each market draws a demand and a cost shock process (market intercept +
//! market trend + stationary AR(1) innovations); treated markets may draw
//! from shifted intercept and trend distributions, which is how selection
//! into treatment is represented. Prices and quantities come from the exact
//! equilibrium of the structural equations, with conduct switching from its
//! pre-merger to its post-merger value at the merger quarter and post-merger
//! cost changes cumulating over the post window. Ground-truth quantities are
//! stored in the panel metadata.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::panel::{MarketId, Observation, PanelDataset, PanelMetadata, TreatmentPlan};
use crate::structural::{
    equilibrium, nuisance_slope, passthrough_price_effect, DemandParams, MarketConditions,
    SupplyParams, Theta3,
};

/// One shock process: market intercept + market trend + AR(1) innovations.
/// Treated markets draw intercepts and trends from (possibly) shifted means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShockProcess {
    #[serde(default)]
    pub intercept_sd: f64,
    #[serde(default)]
    pub intercept_mean_treated: f64,
    #[serde(default)]
    pub trend_sd: f64,
    #[serde(default)]
    pub trend_mean_control: f64,
    #[serde(default)]
    pub trend_mean_treated: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub innovation_sd: f64,
}

impl ShockProcess {
    pub fn quiet() -> Self {
        ShockProcess {
            intercept_sd: 0.0,
            intercept_mean_treated: 0.0,
            trend_sd: 0.0,
            trend_mean_control: 0.0,
            trend_mean_treated: 0.0,
            rho: 0.0,
            innovation_sd: 0.0,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.rho.abs() < 1.0) {
            return Err(Error::Config(format!(
                "{name}: AR(1) coefficient must satisfy |rho| < 1; got {}",
                self.rho
            )));
        }
        for (label, v) in [
            ("intercept_sd", self.intercept_sd),
            ("trend_sd", self.trend_sd),
            ("innovation_sd", self.innovation_sd),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name}.{label} must be >= 0; got {v}")));
            }
        }
        Ok(())
    }
}

/// Optional second demand regime: a fraction of markets (spread evenly over
/// both treatment groups) gets a different demand slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AltDemandSlope {
    pub alpha1: f64,
    /// Assign every k-th market to the alternate regime.
    pub every_kth: usize,
}

/// Give every k-th control market an extra deterministic shock trend,
/// modelling donor markets whose outcomes drift away from the treated group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergentControls {
    #[serde(default)]
    pub demand_trend: f64,
    #[serde(default)]
    pub cost_trend: f64,
    /// Assign every k-th control market to the divergent group.
    pub every_kth: usize,
}

/// Full data-generating-process configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub n_treated: usize,
    pub n_control: usize,
    pub pre_quarters: usize,
    pub post_quarters: usize,
    pub demand: DemandParams,
    pub supply: SupplyParams,
    pub lambda_control: f64,
    pub lambda_pre: f64,
    pub lambda_post: f64,
    /// Standard deviation of the i.i.d. N(0, sd) demand shifters.
    #[serde(default = "one")]
    pub z_sd: f64,
    /// Standard deviation of the i.i.d. N(0, sd) cost shifters.
    #[serde(default = "one")]
    pub w_sd: f64,
    pub demand_shock: ShockProcess,
    pub cost_shock: ShockProcess,
    #[serde(default)]
    pub alt_demand_slope: Option<AltDemandSlope>,
    #[serde(default)]
    pub divergent_controls: Option<DivergentControls>,
}

fn one() -> f64 {
    1.0
}

impl DgpConfig {
    /// Calibration producing prices near 2 and quantities near 3, a conduct
    /// rise of 0.107, and a post-window average cost reduction of 0.134.
    pub fn default_calibration() -> Self {
        DgpConfig {
            n_treated: 40,
            n_control: 160,
            pre_quarters: 8,
            post_quarters: 8,
            demand: DemandParams {
                alpha0: 9.224,
                alpha1: -3.112,
                alpha2: vec![0.5, 0.3],
            },
            supply: SupplyParams {
                theta0: 1.657,
                theta1: 0.05,
                theta2: vec![0.3, 0.2],
                theta3: Theta3::Scalar(-0.134),
            },
            lambda_control: 0.2,
            lambda_pre: 0.2,
            lambda_post: 0.307,
            // Modest shifter scales keep simulated quantities bounded away
            // from zero at the baseline quantity level of ~3.
            z_sd: 0.5,
            w_sd: 0.5,
            demand_shock: ShockProcess {
                intercept_sd: 0.10,
                intercept_mean_treated: 0.0,
                trend_sd: 0.0,
                trend_mean_control: 0.0,
                trend_mean_treated: 0.0,
                rho: 0.5,
                innovation_sd: 0.05,
            },
            cost_shock: ShockProcess {
                intercept_sd: 0.10,
                intercept_mean_treated: 0.0,
                trend_sd: 0.0,
                trend_mean_control: 0.0,
                trend_mean_treated: 0.0,
                rho: 0.5,
                innovation_sd: 0.05,
            },
            alt_demand_slope: None,
            divergent_controls: None,
        }
    }

    pub fn merger_quarter(&self) -> i64 {
        self.pre_quarters as i64
    }

    fn validate(&self) -> Result<()> {
        if self.n_treated == 0 || self.n_control == 0 {
            return Err(Error::Config(
                "simulator needs at least one treated and one control market".into(),
            ));
        }
        if self.pre_quarters == 0 || self.post_quarters == 0 {
            return Err(Error::Config("pre and post windows must be non-empty".into()));
        }
        for (name, l) in [
            ("lambda_control", self.lambda_control),
            ("lambda_pre", self.lambda_pre),
            ("lambda_post", self.lambda_post),
        ] {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]; got {l}")));
            }
        }
        self.demand_shock.validate("demand_shock")?;
        self.cost_shock.validate("cost_shock")?;
        if let Some(alt) = &self.alt_demand_slope {
            if alt.every_kth < 2 {
                return Err(Error::Config(
                    "alt_demand_slope.every_kth must be >= 2".into(),
                ));
            }
            if alt.alpha1 == 0.0 {
                return Err(Error::Config("alternate demand slope must be nonzero".into()));
            }
        }
        if let Some(div) = &self.divergent_controls {
            if div.every_kth == 0 {
                return Err(Error::Config(
                    "divergent_controls.every_kth must be >= 1".into(),
                ));
            }
        }
        Ok(())
    }

    /// True conduct change lambda_post - lambda_pre.
    pub fn true_delta_lambda(&self) -> f64 {
        self.lambda_post - self.lambda_pre
    }
}

struct ShockDraw {
    /// Per-quarter shock values, index 0 = first quarter.
    path: Vec<f64>,
}

fn draw_shock(
    proc_: &ShockProcess,
    treated: bool,
    n_quarters: usize,
    rng: &mut impl Rng,
) -> ShockDraw {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let intercept = if treated {
        proc_.intercept_mean_treated
    } else {
        0.0
    } + proc_.intercept_sd * std_normal.sample(rng);
    let trend_mean = if treated {
        proc_.trend_mean_treated
    } else {
        proc_.trend_mean_control
    };
    let trend = trend_mean + proc_.trend_sd * std_normal.sample(rng);
    // Stationary AR(1) start.
    let stat_sd = if proc_.innovation_sd > 0.0 {
        proc_.innovation_sd / (1.0 - proc_.rho * proc_.rho).sqrt()
    } else {
        0.0
    };
    let mut u = stat_sd * std_normal.sample(rng);
    let mut path = Vec::with_capacity(n_quarters);
    for t in 0..n_quarters {
        if t > 0 {
            u = proc_.rho * u + proc_.innovation_sd * std_normal.sample(rng);
        }
        path.push(intercept + trend * t as f64 + u);
    }
    ShockDraw { path }
}

/// Simulate one panel with the given RNG.
pub fn simulate_panel_with_rng(cfg: &DgpConfig, rng: &mut impl Rng) -> Result<PanelDataset> {
    cfg.validate()?;
    let n_quarters = cfg.pre_quarters + cfg.post_quarters;
    let merger = cfg.merger_quarter();
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let (p, q) = (cfg.demand.alpha2.len(), cfg.supply.theta2.len());

    let gamma_control = nuisance_slope(cfg.supply.theta1, cfg.lambda_control, cfg.demand.alpha1)?;
    let gamma_pre = nuisance_slope(cfg.supply.theta1, cfg.lambda_pre, cfg.demand.alpha1)?;
    let gamma_post = nuisance_slope(cfg.supply.theta1, cfg.lambda_post, cfg.demand.alpha1)?;

    let n_markets = cfg.n_treated + cfg.n_control;
    let mut observations = Vec::with_capacity(n_markets * n_quarters);
    let mut treated_ids = Vec::with_capacity(cfg.n_treated);
    for m in 0..n_markets {
        let treated = m < cfg.n_treated;
        let id = if treated {
            MarketId::new(format!("t{m:04}"))
        } else {
            MarketId::new(format!("c{m:04}"))
        };
        if treated {
            treated_ids.push(id.clone());
        }
        let alpha1 = match &cfg.alt_demand_slope {
            Some(alt) if m % alt.every_kth == alt.every_kth - 1 => alt.alpha1,
            _ => cfg.demand.alpha1,
        };
        let demand = DemandParams {
            alpha1,
            ..cfg.demand.clone()
        };
        let phi = draw_shock(&cfg.demand_shock, treated, n_quarters, rng);
        let vartheta = draw_shock(&cfg.cost_shock, treated, n_quarters, rng);
        // Deterministic extra trends for the divergent control group; these
        // consume no RNG draws.
        let (div_phi, div_vartheta) = match &cfg.divergent_controls {
            Some(d) if !treated && (m - cfg.n_treated) % d.every_kth == 0 => {
                (d.demand_trend, d.cost_trend)
            }
            _ => (0.0, 0.0),
        };
        for t in 0..n_quarters as i64 {
            let z: Vec<f64> = (0..p).map(|_| cfg.z_sd * std_normal.sample(rng)).collect();
            let w: Vec<f64> = (0..q).map(|_| cfg.w_sd * std_normal.sample(rng)).collect();
            let post = treated && t >= merger;
            let lambda = if post {
                cfg.lambda_post
            } else if treated {
                cfg.lambda_pre
            } else {
                cfg.lambda_control
            };
            let gamma = nuisance_slope(cfg.supply.theta1, lambda, alpha1)?;
            let step = if post { t - merger + 1 } else { 0 };
            let mc = MarketConditions {
                z: &z,
                w: &w,
                phi: phi.path[t as usize] + div_phi * t as f64,
                vartheta: vartheta.path[t as usize] + div_vartheta * t as f64,
                efficiency: if post {
                    cfg.supply.theta3.cumulative(step)
                } else {
                    0.0
                },
            };
            let (price, quantity) = equilibrium(&demand, &cfg.supply, gamma, &mc)?;
            if !(price > 0.0) || !(quantity > 0.0) {
                return Err(Error::Validation(format!(
                    "simulated non-positive price/quantity ({price:.3}, {quantity:.3}) at \
                     ({id}, q{t}); shrink the shock scales or recalibrate"
                )));
            }
            observations.push(Observation {
                market: id.clone(),
                quarter: t,
                price,
                quantity,
                seats: None,
                z,
                w,
                x: vec![],
            });
        }
    }

    let mut plan = TreatmentPlan::new(merger, treated_ids);
    plan.pre_window = cfg.pre_quarters as u32;
    plan.post_window = cfg.post_quarters as u32;

    let avg_eff = cfg.supply.theta3.average_over(cfg.post_quarters);
    let mut metadata = PanelMetadata {
        price_unit: "hundreds of dollars".into(),
        quantity_unit: "hundreds of passengers per day".into(),
        extra: Default::default(),
    };
    metadata.extra.insert(
        "truth".into(),
        json!({
            "alpha1": cfg.demand.alpha1,
            "theta1": cfg.supply.theta1,
            "lambda_control": cfg.lambda_control,
            "lambda_pre": cfg.lambda_pre,
            "lambda_post": cfg.lambda_post,
            "delta_lambda": cfg.true_delta_lambda(),
            "gamma_control": gamma_control,
            "gamma_pre": gamma_pre,
            "gamma_post": gamma_post,
            "average_efficiency": avg_eff,
            "efficiency_price_effect":
                passthrough_price_effect(avg_eff, gamma_post, cfg.demand.alpha1)?,
        }),
    );
    PanelDataset::new(observations, plan, metadata)
}

/// Simulate one panel from a seed.
pub fn simulate_panel(cfg: &DgpConfig, seed: u64) -> Result<PanelDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_panel_with_rng(cfg, &mut rng)
}

/// Read one scalar from the simulator ground truth stored in panel metadata.
pub fn truth_value(data: &PanelDataset, key: &str) -> Result<f64> {
    data.metadata
        .extra
        .get("truth")
        .and_then(|t| t.get(key))
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::Validation(format!("no ground-truth value '{key}' in metadata")))
}

/// Monte Carlo summary over replications of (estimate, reported SE).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub estimates: Vec<f64>,
    pub reported_ses: Vec<f64>,
    pub mean: f64,
    /// Across-replication standard deviation of the estimates.
    pub sd: f64,
    /// Average reported standard error.
    pub mean_se: f64,
    pub n_failed: usize,
}

/// Run `replications` simulations with independent RNG streams and apply the
/// statistic (estimate, se) to each panel. Errors if more than 10% of
/// replications fail.
pub fn run_monte_carlo<F>(
    cfg: &DgpConfig,
    replications: usize,
    base_seed: u64,
    stat: F,
) -> Result<McResult>
where
    F: Fn(&PanelDataset) -> Result<(f64, f64)> + Sync,
{
    run_monte_carlo_parallel(cfg, replications, base_seed, 1, stat)
}

/// [`run_monte_carlo`] over a fixed number of worker threads. Replication `r`
/// always uses RNG stream `r + 1` of the base seed, so results are identical
/// for every thread count.
pub fn run_monte_carlo_parallel<F>(
    cfg: &DgpConfig,
    replications: usize,
    base_seed: u64,
    threads: usize,
    stat: F,
) -> Result<McResult>
where
    F: Fn(&PanelDataset) -> Result<(f64, f64)> + Sync,
{
    if replications < 2 {
        return Err(Error::Config("Monte Carlo needs at least 2 replications".into()));
    }
    let threads = threads.max(1).min(replications);
    let run_one = |r: usize| -> Option<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        rng.set_stream(r as u64 + 1);
        match simulate_panel_with_rng(cfg, &mut rng).and_then(|d| stat(&d)) {
            Ok((est, se)) if est.is_finite() => Some((est, se)),
            _ => None,
        }
    };
    let results: Vec<Option<(f64, f64)>> = if threads == 1 {
        (0..replications).map(run_one).collect()
    } else {
        let mut results = vec![None; replications];
        let chunks: Vec<(usize, &mut [Option<(f64, f64)>])> = {
            let size = replications.div_ceil(threads);
            results
                .chunks_mut(size)
                .enumerate()
                .map(|(i, c)| (i * size, c))
                .collect()
        };
        std::thread::scope(|scope| {
            for (offset, chunk) in chunks {
                let run_one = &run_one;
                scope.spawn(move || {
                    for (i, slot) in chunk.iter_mut().enumerate() {
                        *slot = run_one(offset + i);
                    }
                });
            }
        });
        results
    };
    let mut estimates = Vec::with_capacity(replications);
    let mut reported_ses = Vec::with_capacity(replications);
    let mut n_failed = 0usize;
    for r in results {
        match r {
            Some((est, se)) => {
                estimates.push(est);
                reported_ses.push(se);
            }
            None => n_failed += 1,
        }
    }
    if n_failed * 10 > replications {
        return Err(Error::BootstrapAttrition {
            failed: n_failed,
            total: replications,
        });
    }
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mean_se = reported_ses.iter().sum::<f64>() / n;
    Ok(McResult {
        estimates,
        reported_ses,
        mean,
        sd,
        mean_se,
        n_failed,
    })
}
