use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::design::{build_design, DesignMatrix};
use super::vcov::{cluster_sandwich, small_sample_factor};
use super::{wald, Coefficient, Convergence, Estimator, FitResult, ModelSpec, VarianceKind};
use crate::error::{Error, Result};
use crate::linalg::{independent_columns, spd_inverse, COLLINEARITY_TOL};
use crate::linkage::DriverPanel;

const GRADIENT_TOL: f64 = 1e-10;
const MAX_NEWTON_ITERATIONS: usize = 100;
const MAX_LINE_SEARCH: usize = 60;
/// A coefficient past this many log-odds means the likelihood has no
/// finite maximizer.
const SEPARATION_BOUND: f64 = 20.0;

/// One conditioning group: all stops of one driver.
#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    /// One row per stop.
    pub x: DMatrix<f64>,
    pub y: Vec<bool>,
}

impl Stratum {
    pub fn n_events(&self) -> usize {
        self.y.iter().filter(|&&v| v).count()
    }

    /// Contributes to the conditional likelihood only if the outcome varies.
    pub fn is_informative(&self) -> bool {
        let k = self.n_events();
        k > 0 && k < self.y.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClogitEvaluation {
    pub loglik: f64,
    pub gradient: DVector<f64>,
    /// Hessian of the log-likelihood (negative semidefinite).
    pub hessian: DMatrix<f64>,
    pub stratum_loglik: Vec<f64>,
    /// Per-stratum score rows.
    pub stratum_scores: DMatrix<f64>,
}

/// Estimated coefficients and final evaluation of a conditional logit.
#[derive(Debug, Clone)]
pub struct ClogitFit {
    pub theta: Vec<f64>,
    pub evaluation: ClogitEvaluation,
    pub convergence: Convergence,
}

/// Conditional logit likelihood: within each stratum, the probability of the
/// observed set of events among all sets of the same size.
#[derive(Debug, Clone)]
pub struct ClogitProblem {
    pub strata: Vec<Stratum>,
    pub n_params: usize,
    pub names: Vec<String>,
}

struct StratumEval {
    loglik: f64,
    score: DVector<f64>,
    /// Columns not identically zero in the stratum, and the Hessian block
    /// on them; the rest of the stratum's Hessian is zero.
    active: Vec<usize>,
    hessian: DMatrix<f64>,
}

/// Elementary symmetric sums `e_0..=e_k` of `w`, skipping the indices in
/// `skip`, by the recursion `e(m, s) = e(m-1, s) + w_m e(m-1, s-1)`.
fn elementary_sums(w: &[f64], k: usize, skip: &[usize]) -> Vec<f64> {
    let mut e = vec![0.0; k + 1];
    e[0] = 1.0;
    for (m, &wm) in w.iter().enumerate() {
        if skip.contains(&m) {
            continue;
        }
        for s in (1..=k).rev() {
            e[s] += wm * e[s - 1];
        }
    }
    e
}

/// Log of the size-`k` elementary symmetric sum of `exp(eta)` over the
/// stratum, with its gradient and Hessian in theta.
///
/// The derivatives are formed in observation space: the gradient in `eta`
/// is the vector of inclusion probabilities `pi_j` of each row in a random
/// size-`k` subset, the Hessian is `C = [pi_jl - pi_j pi_l]`, and the chain
/// rule gives `X' pi` and `X' C X`.
fn log_denominator(x: &DMatrix<f64>, eta: &[f64], k: usize) -> (f64, DVector<f64>, DMatrix<f64>) {
    let n = eta.len();
    if k == 0 {
        return (0.0, DVector::zeros(x.ncols()), DMatrix::zeros(x.ncols(), x.ncols()));
    }
    let c = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = eta.iter().map(|e| (e - c).exp()).collect();
    let total = elementary_sums(&w, k, &[])[k];
    let mut pi = DVector::zeros(n);
    let mut cov = DMatrix::zeros(n, n);
    for j in 0..n {
        pi[j] = w[j] * elementary_sums(&w, k - 1, &[j])[k - 1] / total;
    }
    for j in 0..n {
        cov[(j, j)] = pi[j] * (1.0 - pi[j]);
        for l in 0..j {
            let joint = if k >= 2 { w[j] * w[l] * elementary_sums(&w, k - 2, &[j, l])[k - 2] / total } else { 0.0 };
            let v = joint - pi[j] * pi[l];
            cov[(j, l)] = v;
            cov[(l, j)] = v;
        }
    }
    let g = x.transpose() * &pi;
    let h = x.transpose() * (&cov * x);
    (total.ln() + k as f64 * c, g, h)
}

impl ClogitProblem {
    pub fn new(strata: Vec<Stratum>, names: Vec<String>) -> Self {
        let n_params = strata.first().map_or(names.len(), |s| s.x.ncols());
        ClogitProblem { strata, n_params, names }
    }

    fn eval_stratum(&self, s: &Stratum, theta: &DVector<f64>) -> StratumEval {
        let eta: Vec<f64> = (&s.x * theta).iter().copied().collect();
        // Dummy columns are mostly zero within a stratum; work on the rest
        // and scatter back.
        let active: Vec<usize> = (0..self.n_params).filter(|&j| s.x.column(j).iter().any(|&v| v != 0.0)).collect();
        let xa = s.x.select_columns(&active);
        let (log_b, g_b, h_b) = log_denominator(&xa, &eta, s.n_events());
        let mut num = 0.0;
        let mut score = DVector::zeros(self.n_params);
        for (j, &y) in s.y.iter().enumerate() {
            if y {
                num += eta[j];
                score += s.x.row(j).transpose();
            }
        }
        for (a, &ja) in active.iter().enumerate() {
            score[ja] -= g_b[a];
        }
        StratumEval { loglik: num - log_b, score, active, hessian: -h_b }
    }

    pub fn evaluate(&self, theta: &[f64]) -> ClogitEvaluation {
        let th = DVector::from_column_slice(theta);
        let parts: Vec<StratumEval> = self.strata.par_iter().map(|s| self.eval_stratum(s, &th)).collect();
        let p = self.n_params;
        let mut loglik = 0.0;
        let mut gradient = DVector::zeros(p);
        let mut hessian = DMatrix::zeros(p, p);
        let mut stratum_scores = DMatrix::zeros(parts.len(), p);
        for (i, e) in parts.iter().enumerate() {
            loglik += e.loglik;
            gradient += &e.score;
            for (a, &ja) in e.active.iter().enumerate() {
                for (b, &jb) in e.active.iter().enumerate() {
                    hessian[(ja, jb)] += e.hessian[(a, b)];
                }
            }
            stratum_scores.set_row(i, &e.score.transpose());
        }
        ClogitEvaluation {
            loglik,
            gradient,
            hessian: crate::linalg::symmetrize(hessian),
            stratum_loglik: parts.iter().map(|e| e.loglik).collect(),
            stratum_scores,
        }
    }

    /// Newton's method with backtracking from theta = 0.
    pub fn fit(&self) -> Result<ClogitFit> {
        let p = self.n_params;
        let mut theta = DVector::zeros(p);
        let mut ev = self.evaluate(theta.as_slice());
        let mut trajectory = vec![ev.loglik];
        for it in 0..=MAX_NEWTON_ITERATIONS {
            let gnorm = ev.gradient.norm();
            let info = -&ev.hessian;
            let inv = spd_inverse(&info);
            let decrement = inv.as_ref().map(|inv| ev.gradient.dot(&(inv * &ev.gradient)));
            if gnorm < GRADIENT_TOL || decrement.is_some_and(|d| d < 1e-24 * (1.0 + ev.loglik.abs())) {
                return Ok(ClogitFit {
                    theta: theta.iter().copied().collect(),
                    convergence: Convergence { iterations: it, gradient_norm: gnorm, converged: true },
                    evaluation: ev,
                });
            }
            if it == MAX_NEWTON_ITERATIONS {
                return Err(Error::NonConvergence {
                    message: format!("conditional logit Newton did not converge in {MAX_NEWTON_ITERATIONS} iterations"),
                    last_residual: gnorm,
                });
            }
            let Some(inv) = inv else {
                return Err(Error::Identification("conditional logit information matrix is singular".into()));
            };
            let dir = inv * &ev.gradient;
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_LINE_SEARCH {
                let cand = &theta + &dir * step;
                let ev_c = self.evaluate(cand.as_slice());
                if ev_c.loglik.is_finite() && ev_c.loglik >= ev.loglik - 1e-12 * (1.0 + ev.loglik.abs()) {
                    accepted = Some((cand, ev_c));
                    break;
                }
                step *= 0.5;
            }
            let Some((cand, ev_c)) = accepted else {
                return Err(Error::Diverged { message: "line search failed to increase the likelihood".into(), trajectory });
            };
            theta = cand;
            ev = ev_c;
            trajectory.push(ev.loglik);
            if theta.iter().any(|t| t.abs() > SEPARATION_BOUND) {
                return Err(Error::Separation {
                    direction: self.names.iter().cloned().zip(theta.iter().copied()).collect(),
                });
            }
        }
        unreachable!()
    }
}

/// Conditional logit with one stratum per driver. Drivers without variation
/// in the outcome are dropped; covariates constant within every stratum
/// cancel from the likelihood and are dropped as collinear.
pub fn fit_conditional_logit(panels: &[DriverPanel], spec: &ModelSpec) -> Result<FitResult> {
    if spec.estimator != Estimator::ConditionalLogit {
        return Err(Error::Specification(format!("expected conditional_logit spec, got {}", spec.estimator)));
    }
    let design = build_design(panels, spec)?;
    fit_conditional_logit_design(&design, spec)
}

/// Conditional logit on a prepared design.
pub fn fit_conditional_logit_design(design: &DesignMatrix, spec: &ModelSpec) -> Result<FitResult> {
    let counts = design.drivers.counts();
    let mut ones = vec![0usize; counts.len()];
    for (&g, &y) in design.drivers.codes.iter().zip(&design.y) {
        ones[g as usize] += usize::from(y > 0.5);
    }
    let informative = |g: usize| ones[g] > 0 && ones[g] < counts[g];
    let n_singletons = counts.iter().filter(|&&c| c == 1).count();
    let n_strata_dropped = (0..counts.len()).filter(|&g| counts[g] > 1 && !informative(g)).count();
    let rows: Vec<usize> = (0..design.n_rows()).filter(|&i| informative(design.drivers.codes[i] as usize)).collect();
    let d = design.subset(&rows);
    let n = d.n_rows();
    if n == 0 {
        return Err(Error::EmptySample("no driver has variation in the outcome".into()));
    }

    // Center within strata; this leaves the conditional likelihood unchanged
    // and turns stratum-constant columns into exact zeros.
    let regs = d.regressors();
    let g = d.drivers.n_levels();
    let dcounts = d.drivers.counts();
    let centered: Vec<Vec<f64>> = regs
        .iter()
        .map(|col| {
            let mut mean = vec![0.0; g];
            for (&s, v) in d.drivers.codes.iter().zip(col.iter()) {
                mean[s as usize] += v;
            }
            for (m, &c) in mean.iter_mut().zip(&dcounts) {
                *m /= c as f64;
            }
            col.iter().zip(&d.drivers.codes).map(|(v, &s)| v - mean[s as usize]).collect()
        })
        .collect();
    let xc = DMatrix::from_iterator(n, centered.len(), centered.iter().flatten().copied());
    let kept = independent_columns(&xc, COLLINEARITY_TOL);
    if !kept.contains(&0) {
        return Err(Error::Identification(
            "treatment is constant within every informative driver: no driver changes perceived race".into(),
        ));
    }
    let names = d.regressor_names();
    let dropped: Vec<String> = (0..names.len()).filter(|c| !kept.contains(c)).map(|c| names[c].clone()).collect();
    let x = xc.select_columns(&kept);

    let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); g];
    for (i, &s) in d.drivers.codes.iter().enumerate() {
        rows_of[s as usize].push(i);
    }
    let strata: Vec<Stratum> = rows_of
        .iter()
        .map(|r| Stratum { x: x.select_rows(r), y: r.iter().map(|&i| d.y[i] > 0.5).collect() })
        .collect();
    let kept_names: Vec<String> = kept.iter().map(|&c| names[c].clone()).collect();
    let problem = ClogitProblem::new(strata, kept_names.clone());
    let fit = problem.fit()?;
    let ev = &fit.evaluation;
    let bread = spd_inverse(&-&ev.hessian)
        .ok_or_else(|| Error::Identification("conditional logit information matrix is singular".into()))?;
    let p = kept.len();
    let v = match spec.variance_kind() {
        VarianceKind::Classical => bread.clone(),
        VarianceKind::ClusterRobust => cluster_sandwich(&bread, &ev.stratum_scores) * small_sample_factor(g, n, p)?,
    };
    let (delta_hat, se_delta) = (fit.theta[0], v[(0, 0)].sqrt());
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
        coefficients: kept_names
            .into_iter()
            .enumerate()
            .map(|(i, name)| Coefficient { name, estimate: fit.theta[i], std_error: v[(i, i)].sqrt() })
            .collect(),
        dropped_collinear: dropped,
        n_obs_input: design.n_rows_input,
        n_obs_missing: design.n_rows_missing,
        n_obs_used: n,
        n_drivers_used: g,
        n_clusters: g,
        n_singletons_dropped: n_singletons,
        n_strata_dropped,
        n_separated_dropped: 0,
        k_effective: p,
        se_classical: Some(bread[(0, 0)].sqrt()),
        log_likelihood: Some(ev.loglik),
        convergence: fit.convergence,
        residuals: None,
        fixed_effects: None,
    })
}
