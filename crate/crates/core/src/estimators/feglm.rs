use nalgebra::{DMatrix, DVector};

use super::absorb::Absorber;
use super::design::{build_design, DesignMatrix, Factor};
use super::linear::columns_to_matrix;
use super::vcov::{cluster_scores, cluster_sandwich, small_sample_factor};
use super::{wald, Coefficient, Convergence, Estimator, FitResult, ModelSpec, VarianceKind};
use crate::error::{Error, Result};
use crate::linalg::{least_squares, spd_inverse, COLLINEARITY_TOL};
use crate::linkage::{DriverId, DriverPanel};

const DEVIANCE_TOL: f64 = 1e-8;
const MAX_IRLS_ITERATIONS: usize = 200;
const MAX_STEP_HALVINGS: usize = 30;
/// Coefficients beyond this many log-odds indicate (quasi-)separation.
const SEPARATION_BOUND: f64 = 20.0;

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-likelihood of a logit model with one intercept per driver.
#[derive(Debug, Clone)]
pub struct LogitFeProblem {
    pub y: Vec<f64>,
    pub x: DMatrix<f64>,
    pub drivers: Factor,
}

impl LogitFeProblem {
    pub fn from_design(d: &DesignMatrix) -> Self {
        LogitFeProblem { y: d.y.clone(), x: columns_to_matrix(&d.regressors(), d.n_rows()), drivers: d.drivers.clone() }
    }

    fn eta(&self, alpha: &[f64], beta: &[f64]) -> Vec<f64> {
        let xb = &self.x * DVector::from_column_slice(beta);
        self.drivers.codes.iter().zip(xb.iter()).map(|(&g, v)| alpha[g as usize] + v).collect()
    }

    pub fn loglik(&self, alpha: &[f64], beta: &[f64]) -> f64 {
        self.eta(alpha, beta)
            .iter()
            .zip(&self.y)
            .map(|(&e, &y)| y * e - if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() })
            .sum()
    }

    /// Gradient with respect to the driver intercepts and the slopes.
    pub fn gradient(&self, alpha: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let resid: Vec<f64> = self.eta(alpha, beta).iter().zip(&self.y).map(|(&e, &y)| y - logistic(e)).collect();
        let mut ga = vec![0.0; self.drivers.n_levels()];
        for (&g, r) in self.drivers.codes.iter().zip(&resid) {
            ga[g as usize] += r;
        }
        let gb = (self.x.transpose() * DVector::from_vec(resid)).iter().copied().collect();
        (ga, gb)
    }
}

fn deviance(y: &[f64], mu: &[f64]) -> f64 {
    -2.0 * y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| if y > 0.5 { m.max(f64::MIN_POSITIVE).ln() } else { (1.0 - m).max(f64::MIN_POSITIVE).ln() })
        .sum::<f64>()
}

/// Rows of drivers whose outcomes vary, plus the counts of singleton and
/// multi-stop constant-outcome drivers removed.
fn informative_rows(d: &DesignMatrix) -> (Vec<usize>, usize, usize) {
    let n = d.drivers.n_levels();
    let (mut count, mut ones) = (vec![0usize; n], vec![0usize; n]);
    for (&g, &y) in d.drivers.codes.iter().zip(&d.y) {
        count[g as usize] += 1;
        ones[g as usize] += usize::from(y > 0.5);
    }
    let keep = |g: usize| ones[g] > 0 && ones[g] < count[g];
    let rows = (0..d.n_rows()).filter(|&i| keep(d.drivers.codes[i] as usize)).collect();
    let singletons = count.iter().filter(|&&c| c == 1).count();
    let separated = (0..n).filter(|&g| count[g] > 1 && !keep(g)).count();
    (rows, singletons, separated)
}

struct WeightedWithin {
    z: Vec<f64>,
    x: DMatrix<f64>,
}

fn weighted_within(z: &[f64], x: &DMatrix<f64>, drivers: &Factor, w: &[f64]) -> Result<WeightedWithin> {
    let absorber = Absorber::new(std::slice::from_ref(drivers), Some(w));
    let mut cols: Vec<Vec<f64>> = std::iter::once(z.to_vec()).chain(x.column_iter().map(|c| c.iter().copied().collect())).collect();
    absorber.demean_all(&mut cols)?;
    let z = cols.remove(0);
    let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    Ok(WeightedWithin { z, x: columns_to_matrix(&refs, x.nrows()) })
}

/// Logit with driver intercepts, fit by IRLS with the intercepts absorbed
/// by weighted within-driver demeaning at every step.
///
/// Drivers whose outcome never varies contribute nothing and are removed
/// before fitting.
pub fn fit_feglm_logit(panels: &[DriverPanel], spec: &ModelSpec) -> Result<FitResult> {
    if spec.estimator != Estimator::FeglmLogit {
        return Err(Error::Specification(format!("expected feglm_logit spec, got {}", spec.estimator)));
    }
    let design = build_design(panels, spec)?;
    let (rows, n_singletons, n_separated) = informative_rows(&design);
    let d = design.subset(&rows);
    let n = d.n_rows();
    if n == 0 {
        return Err(Error::EmptySample("no driver has variation in the outcome".into()));
    }
    let x_full = columns_to_matrix(&d.regressors(), n);
    let names = d.regressor_names();
    let y = &d.y;

    // Collinearity is judged once, on the unweighted within design.
    let unweighted = weighted_within(y, &x_full, &d.drivers, &vec![1.0; n])?;
    let kept = crate::linalg::independent_columns(&unweighted.x, COLLINEARITY_TOL);
    if !kept.contains(&0) {
        return Err(Error::Identification(
            "treatment is collinear with the driver effects: no informative driver changes perceived race".into(),
        ));
    }
    let dropped: Vec<usize> = (0..x_full.ncols()).filter(|c| !kept.contains(c)).collect();
    let x = x_full.select_columns(&kept);
    let p = x.ncols();

    // Start from driver intercepts only, so every iterate has the form
    // alpha + X beta. Informative drivers have outcome means inside (0, 1).
    let counts = d.drivers.counts();
    let mut ybar = vec![0.0; counts.len()];
    for (&g, &v) in d.drivers.codes.iter().zip(y) {
        ybar[g as usize] += v / counts[g as usize] as f64;
    }
    let mut eta: Vec<f64> = d.drivers.codes.iter().map(|&g| (ybar[g as usize] / (1.0 - ybar[g as usize])).ln()).collect();
    let mut mu: Vec<f64> = eta.iter().map(|&e| logistic(e)).collect();
    let mut dev = deviance(y, &mu);
    let mut trajectory = vec![dev];
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=MAX_IRLS_ITERATIONS {
        iterations = it;
        let w: Vec<f64> = mu.iter().map(|m| (m * (1.0 - m)).max(1e-300)).collect();
        let z: Vec<f64> = eta.iter().zip(y).zip(&mu).zip(&w).map(|(((e, y), m), w)| e + (y - m) / w).collect();
        let ww = weighted_within(&z, &x, &d.drivers, &w)?;
        let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
        let xs = DMatrix::from_fn(n, p, |i, j| ww.x[(i, j)] * sw[i]);
        let zs: Vec<f64> = ww.z.iter().zip(&sw).map(|(a, b)| a * b).collect();
        let ls = least_squares(&xs, &zs, 0.0);
        if ls.kept.len() < p {
            return Err(Error::Identification("weighted design lost rank during IRLS".into()));
        }
        let xb = &ww.x * DVector::from_column_slice(&ls.coef);
        let eta_new: Vec<f64> = (0..n).map(|i| z[i] - (ww.z[i] - xb[i])).collect();

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_STEP_HALVINGS {
            let cand: Vec<f64> = eta.iter().zip(&eta_new).map(|(o, nw)| o + step * (nw - o)).collect();
            let mu_c: Vec<f64> = cand.iter().map(|&e| logistic(e)).collect();
            let dev_c = deviance(y, &mu_c);
            if dev_c.is_finite() && dev_c <= dev * (1.0 + 1e-12) + 1e-12 {
                accepted = Some((cand, mu_c, dev_c));
                break;
            }
            step *= 0.5;
        }
        let Some((eta_c, mu_c, dev_c)) = accepted else {
            return Err(Error::Diverged { message: "IRLS step halving failed to reduce the deviance".into(), trajectory });
        };
        let change = (dev - dev_c).abs() / (0.1 + dev_c.abs());
        eta = eta_c;
        mu = mu_c;
        dev = dev_c;
        trajectory.push(dev);
        if change < DEVIANCE_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            message: format!("IRLS did not converge in {MAX_IRLS_ITERATIONS} iterations"),
            last_residual: trajectory.windows(2).last().map_or(f64::NAN, |w| (w[0] - w[1]).abs() / (0.1 + w[1].abs())),
        });
    }

    // Slopes from the final linear predictor, which is exact regardless of
    // the step taken.
    let w: Vec<f64> = mu.iter().map(|m| m * (1.0 - m)).collect();
    let ww = weighted_within(&eta, &x, &d.drivers, &w)?;
    let xs = DMatrix::from_fn(n, p, |i, j| ww.x[(i, j)] * w[i].sqrt());
    let es: Vec<f64> = ww.z.iter().zip(&w).map(|(a, b)| a * b.sqrt()).collect();
    let beta = least_squares(&xs, &es, 0.0).coef;

    let large: Vec<(String, f64)> =
        kept.iter().zip(&beta).filter(|(_, b)| b.abs() > SEPARATION_BOUND).map(|(&c, &b)| (names[c].clone(), b)).collect();
    if !large.is_empty() {
        return Err(Error::Separation { direction: large });
    }

    let info = xs.transpose() * &xs;
    let bread = spd_inverse(&info).ok_or_else(|| Error::Identification("singular logit information matrix".into()))?;
    let resid: Vec<f64> = y.iter().zip(&mu).map(|(a, b)| a - b).collect();
    let scores = cluster_scores(&ww.x, &resid, &d.clusters);
    let gradient_norm = (ww.x.transpose() * DVector::from_column_slice(&resid)).norm();
    let k_effective = p;
    let v = match spec.variance_kind() {
        VarianceKind::Classical => bread.clone(),
        VarianceKind::ClusterRobust => {
            cluster_sandwich(&bread, &scores) * small_sample_factor(d.clusters.n_levels(), n, k_effective)?
        }
    };

    let xb = &x * DVector::from_column_slice(&beta);
    let mut alpha_sum = vec![0.0; d.drivers.n_levels()];
    for (i, &g) in d.drivers.codes.iter().enumerate() {
        alpha_sum[g as usize] += eta[i] - xb[i];
    }
    let fixed_effects = d
        .drivers
        .labels
        .iter()
        .zip(alpha_sum.iter().zip(&counts))
        .map(|(l, (s, &c))| Ok((l.parse::<DriverId>()?, s / c as f64)))
        .collect::<Result<Vec<_>>>()?;

    let (delta_hat, se_delta) = (beta[0], v[(0, 0)].sqrt());
    let (ci95, p_value) = wald(delta_hat, se_delta);
    Ok(FitResult {
        label: spec.label(),
        estimator: spec.estimator,
        outcome: spec.outcome,
        delta_hat,
        se_delta,
        ci95,
        p_value,
        variance: spec.variance_kind(),
        coefficients: kept
            .iter()
            .enumerate()
            .map(|(i, &c)| Coefficient { name: names[c].clone(), estimate: beta[i], std_error: v[(i, i)].sqrt() })
            .collect(),
        dropped_collinear: dropped.iter().map(|&c| names[c].clone()).collect(),
        n_obs_input: design.n_rows_input,
        n_obs_missing: design.n_rows_missing,
        n_obs_used: n,
        n_drivers_used: d.drivers.n_levels(),
        n_clusters: d.clusters.n_levels(),
        n_singletons_dropped: n_singletons,
        n_strata_dropped: 0,
        n_separated_dropped: n_separated,
        k_effective,
        se_classical: Some(bread[(0, 0)].sqrt()),
        log_likelihood: Some(-dev / 2.0),
        convergence: Convergence { iterations, gradient_norm, converged },
        residuals: None,
        fixed_effects: Some(fixed_effects),
    })
}
