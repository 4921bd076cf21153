use nalgebra::DMatrix;

use super::design::Factor;
use crate::error::{Error, Result};
use crate::linalg::symmetrize;

/// `G/(G-1) * (N-1)/(N-k)`.
pub fn small_sample_factor(n_clusters: usize, n_obs: usize, k_effective: usize) -> Result<f64> {
    if n_clusters < 2 {
        return Err(Error::Inference(format!("cluster-robust variance needs at least 2 clusters, got {n_clusters}")));
    }
    if n_obs <= k_effective {
        return Err(Error::Inference(format!(
            "no residual degrees of freedom: {n_obs} observations, {k_effective} parameters"
        )));
    }
    let (g, n, k) = (n_clusters as f64, n_obs as f64, k_effective as f64);
    Ok(g / (g - 1.0) * (n - 1.0) / (n - k))
}

/// Per-cluster score sums `sum_{i in g} x_i e_i`, one row per cluster level.
pub fn cluster_scores(x: &DMatrix<f64>, residuals: &[f64], clusters: &Factor) -> DMatrix<f64> {
    let p = x.ncols();
    let mut s = DMatrix::zeros(clusters.n_levels(), p);
    for (i, (&g, &e)) in clusters.codes.iter().zip(residuals).enumerate() {
        for j in 0..p {
            s[(g as usize, j)] += x[(i, j)] * e;
        }
    }
    s
}

/// `B (S'S) B` for bread `B` and cluster score rows `S`, without any
/// small-sample factor.
pub fn cluster_sandwich(bread: &DMatrix<f64>, scores: &DMatrix<f64>) -> DMatrix<f64> {
    let meat = scores.transpose() * scores;
    symmetrize(bread * meat * bread)
}

/// Cluster-robust variance `c * B M B` with `M` built from `x` and
/// `residuals` and `c` from [`small_sample_factor`].
pub fn cluster_robust_vcov(
    x: &DMatrix<f64>,
    residuals: &[f64],
    clusters: &Factor,
    bread: &DMatrix<f64>,
    k_effective: usize,
) -> Result<DMatrix<f64>> {
    let c = small_sample_factor(clusters.n_levels(), x.nrows(), k_effective)?;
    Ok(cluster_sandwich(bread, &cluster_scores(x, residuals, clusters)) * c)
}
