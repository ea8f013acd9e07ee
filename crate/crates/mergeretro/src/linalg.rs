//! Shared dense linear algebra: OLS, cluster-robust covariance, and
//! fixed-effect absorption by iterated projection.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff for rank checks.
pub const RANK_TOL: f64 = 1e-10;

/// Solve the square or least-squares system `A x = b`, failing with the
/// smallest singular value when `A` is numerically rank deficient.
pub fn solve_full_rank(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if !(min_sv > RANK_TOL * max_sv.max(1.0)) {
        return Err(Error::RankDeficient {
            context: context.to_string(),
            min_singular: min_sv,
        });
    }
    svd.solve(b, 0.0)
        .map_err(|e| Error::Validation(format!("{context}: {e}")))
}

/// Invert a symmetric positive-definite matrix, with rank diagnostics.
pub fn invert_spd(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if !(min_sv > RANK_TOL * max_sv.max(1.0)) {
        return Err(Error::RankDeficient {
            context: context.to_string(),
            min_singular: min_sv,
        });
    }
    svd.pseudo_inverse(0.0)
        .map_err(|e| Error::Validation(format!("{context}: {e}")))
}

/// Invert a general square matrix, with rank diagnostics.
pub fn invert_full(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Validation(format!(
            "{context}: matrix is {}x{}, not square",
            a.nrows(),
            a.ncols()
        )));
    }
    let svd = a.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if !(min_sv > RANK_TOL * max_sv.max(1.0)) {
        return Err(Error::RankDeficient {
            context: context.to_string(),
            min_singular: min_sv,
        });
    }
    svd.pseudo_inverse(0.0)
        .map_err(|e| Error::Validation(format!("{context}: {e}")))
}

/// OLS coefficients of `y` on the columns of `x`.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    solve_full_rank(&xtx, &xty, context)
}

/// Cluster-robust sandwich covariance with CR1 small-sample scaling
/// G/(G-1) * (N-1)/(N-K).
///
/// `bread` is the inverse of the cross-product matrix (e.g. (X'X)^-1 for OLS,
/// or the 2SLS bread); `scores` holds the per-observation score rows whose
/// within-cluster sums form the meat (X_i * u_i for OLS).
pub fn cluster_vcov(
    bread: &DMatrix<f64>,
    scores: &DMatrix<f64>,
    clusters: &[usize],
    n_params: usize,
) -> DMatrix<f64> {
    let n = scores.nrows();
    let k = scores.ncols();
    debug_assert_eq!(clusters.len(), n);

    let n_clusters = clusters.iter().copied().max().map_or(0, |m| m + 1);
    let mut sums = DMatrix::<f64>::zeros(n_clusters, k);
    for (i, &g) in clusters.iter().enumerate() {
        for j in 0..k {
            sums[(g, j)] += scores[(i, j)];
        }
    }
    let mut meat = DMatrix::<f64>::zeros(k, k);
    let mut g_count = 0usize;
    for g in 0..n_clusters {
        let row = sums.row(g);
        if row.iter().any(|v| *v != 0.0) {
            g_count += 1;
        }
        meat += row.transpose() * row;
    }
    let g_count = g_count.max(2) as f64;
    let n_f = n as f64;
    let scale = g_count / (g_count - 1.0) * (n_f - 1.0) / (n_f - n_params as f64).max(1.0);
    bread * meat * bread.transpose() * scale
}

/// Map arbitrary hashable labels to dense 0..G-1 indices in first-seen order.
pub fn dense_groups<T: std::hash::Hash + Eq + Clone>(labels: &[T]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(l.clone()).or_insert(next)
        })
        .collect()
}

/// Fixed-effect structures removable by iterated projection.
pub enum Absorber {
    /// Demean within each group (market or quarter fixed effects).
    GroupMean(Vec<usize>),
    /// Project out an intercept and a linear time trend within each group
    /// (market-specific or group-specific linear trends).
    GroupTrend { groups: Vec<usize>, time: Vec<f64> },
}

impl Absorber {
    fn apply(&self, col: &mut [f64]) -> f64 {
        match self {
            Absorber::GroupMean(groups) => {
                let g_max = groups.iter().copied().max().map_or(0, |m| m + 1);
                let mut sum = vec![0.0; g_max];
                let mut count = vec![0usize; g_max];
                for (i, &g) in groups.iter().enumerate() {
                    sum[g] += col[i];
                    count[g] += 1;
                }
                let mut max_change = 0.0f64;
                for (i, &g) in groups.iter().enumerate() {
                    let mean = sum[g] / count[g] as f64;
                    col[i] -= mean;
                    max_change = max_change.max(mean.abs());
                }
                max_change
            }
            Absorber::GroupTrend { groups, time } => {
                let g_max = groups.iter().copied().max().map_or(0, |m| m + 1);
                // Per-group OLS of col on [1, t] via accumulated moments.
                let mut n = vec![0.0f64; g_max];
                let mut st = vec![0.0f64; g_max];
                let mut stt = vec![0.0f64; g_max];
                let mut sy = vec![0.0f64; g_max];
                let mut sty = vec![0.0f64; g_max];
                for (i, &g) in groups.iter().enumerate() {
                    n[g] += 1.0;
                    st[g] += time[i];
                    stt[g] += time[i] * time[i];
                    sy[g] += col[i];
                    sty[g] += time[i] * col[i];
                }
                let mut a = vec![0.0f64; g_max];
                let mut b = vec![0.0f64; g_max];
                for g in 0..g_max {
                    if n[g] == 0.0 {
                        continue;
                    }
                    let det = n[g] * stt[g] - st[g] * st[g];
                    if det.abs() > 1e-12 * (n[g] * stt[g]).abs().max(1.0) {
                        b[g] = (n[g] * sty[g] - st[g] * sy[g]) / det;
                        a[g] = (sy[g] - b[g] * st[g]) / n[g];
                    } else {
                        // Single period in the group: only an intercept is estimable.
                        a[g] = sy[g] / n[g];
                        b[g] = 0.0;
                    }
                }
                let mut max_change = 0.0f64;
                for (i, &g) in groups.iter().enumerate() {
                    let fitted = a[g] + b[g] * time[i];
                    col[i] -= fitted;
                    max_change = max_change.max(fitted.abs());
                }
                max_change
            }
        }
    }
}

/// Iteratively project all columns onto the orthogonal complement of the
/// absorbed fixed-effect structures, to tolerance `tol` on the largest
/// adjustment applied in a sweep.
pub fn absorb(columns: &mut [Vec<f64>], absorbers: &[Absorber], tol: f64, max_iter: usize) {
    for col in columns.iter_mut() {
        for _ in 0..max_iter {
            let mut max_change = 0.0f64;
            for a in absorbers {
                max_change = max_change.max(a.apply(col));
            }
            if max_change < tol || absorbers.len() == 1 {
                break;
            }
        }
    }
}

/// Pack per-column data into a column-major design matrix.
pub fn to_matrix(columns: &[Vec<f64>]) -> DMatrix<f64> {
    let n = columns.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i])
}
