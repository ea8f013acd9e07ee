//! Cross-checks against independently computed answers: equilibrium prices
//! are verified by substituting them back into both structural equations,
//! and delta-method standard errors are verified against finite-difference
//! gradients of the reported parameter functionals.

use mergeretro::estimator::{estimate_structural, StructuralSpec};
use mergeretro::sim::{simulate_panel, DgpConfig};
use mergeretro::structural::{
    equilibrium, DemandParams, MarketConditions, SupplyParams, Theta3,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Residuals of the demand and pricing equations at a candidate (P, Q).
fn equation_residuals(
    demand: &DemandParams,
    supply: &SupplyParams,
    gamma: f64,
    mc: &MarketConditions<'_>,
    price: f64,
    quantity: f64,
) -> (f64, f64) {
    let zsum: f64 = demand.alpha2.iter().zip(mc.z).map(|(a, b)| a * b).sum();
    let wsum: f64 = supply.theta2.iter().zip(mc.w).map(|(a, b)| a * b).sum();
    let demand_resid = demand.alpha0 + demand.alpha1 * price + zsum + mc.phi - quantity;
    let supply_resid =
        supply.theta0 + gamma * quantity + wsum + mc.efficiency + mc.vartheta - price;
    (demand_resid, supply_resid)
}

#[test]
fn equilibrium_solves_both_equations_on_random_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(991);
    for _ in 0..20_000 {
        let demand = DemandParams {
            alpha0: rng.gen_range(5.0..12.0),
            alpha1: rng.gen_range(-5.0..-0.5),
            alpha2: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
        };
        let supply = SupplyParams {
            theta0: rng.gen_range(0.5..3.0),
            theta1: rng.gen_range(-0.2..0.2),
            theta2: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            theta3: Theta3::Scalar(rng.gen_range(-0.3..0.0)),
        };
        let gamma = rng.gen_range(-0.1..0.4);
        let z = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let w = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let mc = MarketConditions {
            z: &z,
            w: &w,
            phi: rng.gen_range(-0.5..0.5),
            vartheta: rng.gen_range(-0.5..0.5),
            efficiency: rng.gen_range(-0.2..0.0),
        };
        if (1.0 - gamma * demand.alpha1).abs() < 1e-3 {
            continue;
        }
        let (p, q) = equilibrium(&demand, &supply, gamma, &mc).unwrap();
        let (rd, rs) = equation_residuals(&demand, &supply, gamma, &mc, p, q);
        assert!(rd.abs() <= 1e-10, "demand residual {rd:e}");
        assert!(rs.abs() <= 1e-10, "pricing residual {rs:e}");
    }
}

/// Central finite-difference gradient of `f` at `x`.
fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = 1e-6;
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[i] += h;
            dn[i] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn delta_method_ses_match_finite_difference_gradients() {
    let data = simulate_panel(&DgpConfig::default_calibration(), 17).unwrap();
    let est = estimate_structural(&data, &StructuralSpec::default()).unwrap();

    let i_a = est.demand.position("alpha1").unwrap();
    let va = est.demand.vcov[i_a][i_a];
    let sv = est.supply.vcov_matrix();
    let i_pre = est.supply.position("gamma_pre").unwrap();
    let i_post = est.supply.position("gamma_post").unwrap();
    let i_t3 = est.supply.position("theta3").unwrap();
    let alpha1 = est.demand.coefficient("alpha1").unwrap();
    let g_pre = est.supply.coefficient("gamma_pre").unwrap();
    let g_post = est.supply.coefficient("gamma_post").unwrap();
    let t3 = est.supply.coefficient("theta3").unwrap();

    // Stack the relevant parameters as x = (alpha1, gamma_pre, gamma_post,
    // theta3) with block-diagonal covariance across the two equations.
    let x = [alpha1, g_pre, g_post, t3];
    let mut cov = [[0.0f64; 4]; 4];
    cov[0][0] = va;
    for (r, ir) in [(1, i_pre), (2, i_post), (3, i_t3)] {
        for (c, ic) in [(1, i_pre), (2, i_post), (3, i_t3)] {
            cov[r][c] = sv[(ir, ic)];
        }
    }
    let quad = |g: &[f64]| -> f64 {
        let mut v = 0.0;
        for r in 0..4 {
            for c in 0..4 {
                v += g[r] * cov[r][c] * g[c];
            }
        }
        v
    };

    let g_dl = fd_gradient(|x| -x[0] * (x[2] - x[1]), &x);
    let se_dl = quad(&g_dl).sqrt();
    assert!(
        (se_dl - est.delta_lambda_se).abs() < 1e-6 * est.delta_lambda_se,
        "delta_lambda SE {} vs finite-difference {}",
        est.delta_lambda_se,
        se_dl
    );

    let g_pe = fd_gradient(|x| x[3] / (1.0 - x[2] * x[0]), &x);
    let se_pe = quad(&g_pe).sqrt();
    assert!(
        (se_pe - est.efficiency_price_effect_se).abs() < 1e-6 * est.efficiency_price_effect_se,
        "price-effect SE {} vs finite-difference {}",
        est.efficiency_price_effect_se,
        se_pe
    );

    // With a scalar cost shift the average-efficiency SE is just the theta3 SE.
    assert!((est.average_efficiency_se - sv[(i_t3, i_t3)].sqrt()).abs() < 1e-12);
}
