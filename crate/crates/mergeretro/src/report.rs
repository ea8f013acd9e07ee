//! Estimation reports: named coefficients, covariance, diagnostics, and
//! serialization to JSON and aligned text tables.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients plus cluster-robust covariance from a single regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    /// Coefficient names, aligned with `coefficients`, `se`, and `vcov`.
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Row-major covariance matrix.
    pub vcov: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub cluster_level: String,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub diagnostics: BTreeMap<String, f64>,
}

impl EstimateReport {
    pub fn from_parts(
        names: Vec<String>,
        coefficients: Vec<f64>,
        vcov: DMatrix<f64>,
        cluster_level: &str,
        n_obs: usize,
        n_clusters: usize,
    ) -> Self {
        let k = coefficients.len();
        debug_assert_eq!(vcov.nrows(), k);
        let se = (0..k).map(|i| vcov[(i, i)].max(0.0).sqrt()).collect();
        let vcov_rows = (0..k)
            .map(|i| (0..k).map(|j| vcov[(i, j)]).collect())
            .collect();
        EstimateReport {
            names,
            coefficients,
            vcov: vcov_rows,
            se,
            cluster_level: cluster_level.to_string(),
            n_obs,
            n_clusters,
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn vcov_matrix(&self) -> DMatrix<f64> {
        let k = self.coefficients.len();
        DMatrix::from_fn(k, k, |i, j| self.vcov[i][j])
    }

    pub fn coefficient(&self, name: &str) -> Result<f64> {
        self.position(name).map(|i| self.coefficients[i])
    }

    pub fn se_of(&self, name: &str) -> Result<f64> {
        self.position(name).map(|i| self.se[i])
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Validation(format!("no coefficient named '{name}'")))
    }

    /// Two-sided normal-approximation p-values.
    pub fn p_values(&self) -> Vec<f64> {
        self.coefficients
            .iter()
            .zip(&self.se)
            .map(|(&b, &s)| {
                if s > 0.0 {
                    2.0 * normal_sf((b / s).abs())
                } else {
                    f64::NAN
                }
            })
            .collect()
    }

    /// Aligned plain-text coefficient table.
    pub fn to_text_table(&self, title: &str) -> String {
        let mut out = String::new();
        out.push_str(title);
        out.push('\n');
        let name_w = self
            .names
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(4)
            .max(4);
        out.push_str(&format!(
            "{:<name_w$}  {:>12}  {:>12}  {:>8}\n",
            "name", "estimate", "se", "p"
        ));
        let pvals = self.p_values();
        for i in 0..self.coefficients.len() {
            out.push_str(&format!(
                "{:<name_w$}  {:>12.6}  {:>12.6}  {:>8.4}\n",
                self.names[i], self.coefficients[i], self.se[i], pvals[i]
            ));
        }
        out.push_str(&format!(
            "clusters: {} ({}), observations: {}\n",
            self.n_clusters, self.cluster_level, self.n_obs
        ));
        out
    }
}

/// Upper tail of the standard normal, |error| < 7.5e-8 (Abramowitz-Stegun 26.2.17).
pub fn normal_sf(x: f64) -> f64 {
    if x < 0.0 {
        return 1.0 - normal_sf(-x);
    }
    let t = 1.0 / (1.0 + 0.2316419 * x);
    let poly = t
        * (0.319381530
            + t * (-0.356563782 + t * (1.781477937 + t * (-1.821255978 + t * 1.330274429))));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    pdf * poly
}
