use nalgebra::DMatrix;

use super::absorb::{absorb_fixed_effects, absorbed_dof, Absorber, MAX_PROJECTION_ITERATIONS, PROJECTION_TOL};
use super::design::{build_design, DesignMatrix, Factor};
use super::vcov::cluster_robust_vcov;
use super::{
    wald, Coefficient, Convergence, DofRule, Estimator, FeDim, FitOptions, FitResult, ModelSpec, VarianceKind,
};
use crate::error::{Error, Result};
use crate::linalg::{least_squares, LeastSquares, COLLINEARITY_TOL};
use crate::linkage::{DriverId, DriverPanel};

pub fn fit_linear_fe(panels: &[DriverPanel], spec: &ModelSpec) -> Result<FitResult> {
    fit_linear_fe_with(panels, spec, &FitOptions::default())
}

pub fn fit_linear_fe_with(panels: &[DriverPanel], spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    if spec.estimator != Estimator::LinearFe {
        return Err(Error::Specification(format!("expected linear_fe spec, got {}", spec.estimator)));
    }
    let design = build_design(panels, spec)?;
    fit_linear_design(&design, spec, opts)
}

pub(crate) fn columns_to_matrix(cols: &[&[f64]], n: usize) -> DMatrix<f64> {
    DMatrix::from_iterator(n, cols.len(), cols.iter().flat_map(|c| c.iter().copied()))
}

/// Rows whose driver appears at least twice.
pub(crate) fn non_singleton_rows(drivers: &Factor) -> (Vec<usize>, usize) {
    let counts = drivers.counts();
    let rows = (0..drivers.codes.len()).filter(|&i| counts[drivers.codes[i] as usize] >= 2).collect();
    (rows, counts.iter().filter(|&&c| c == 1).count())
}

/// Fits the linear probability model on a prepared design. Singleton
/// drivers are removed first; they are fit exactly by their own intercept
/// and carry no information about the treatment coefficient.
pub fn fit_linear_design(design: &DesignMatrix, spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    let (rows, n_singletons) = non_singleton_rows(&design.drivers);
    let d = if n_singletons > 0 { design.subset(&rows) } else { design.clone() };
    if d.n_rows() == 0 {
        return Err(Error::EmptySample("no driver has two or more usable stops".into()));
    }
    let within = absorb_fixed_effects(&d)?;
    let n = within.n_rows();
    let x = columns_to_matrix(&within.regressors(), n);
    let ls = least_squares(&x, &within.y, COLLINEARITY_TOL);
    if ls.position(0).is_none() {
        return Err(Error::Identification(
            "treatment is collinear with the fixed effects: no driver changes perceived race".into(),
        ));
    }

    let fe_df = absorbed_dof(&within.fixed_effects);
    let fe_all: usize = fe_df.iter().sum();
    let fe_counted: usize = match spec.dof_rule {
        DofRule::CountAll => fe_all,
        DofRule::NestedExcluded => within
            .fixed_effects
            .iter()
            .zip(&fe_df)
            .filter(|(f, _)| !f.nested_in(&within.clusters))
            .map(|(_, df)| *df)
            .sum(),
    };
    let k_classical = ls.kept.len() + fe_all;
    let k_effective = ls.kept.len() + fe_counted;

    let rss: f64 = ls.residuals.iter().map(|e| e * e).sum();
    if n <= k_classical {
        return Err(Error::Inference(format!("no residual degrees of freedom: {n} rows, {k_classical} parameters")));
    }
    let v_classical = &ls.xtx_inv * (rss / (n - k_classical) as f64);
    let variance = spec.variance_kind();
    let kept_x = x.select_columns(&ls.kept);
    let v = match variance {
        VarianceKind::Classical => v_classical.clone(),
        VarianceKind::ClusterRobust => {
            cluster_robust_vcov(&kept_x, &ls.residuals, &within.clusters, &ls.xtx_inv, k_effective)?
        }
    };

    let fixed_effects = if opts.recover_fixed_effects { Some(recover_driver_effects(&d, &ls)?) } else { None };
    Ok(assemble(
        spec,
        &d,
        &ls,
        &v,
        v_classical[(0, 0)].sqrt(),
        design.n_rows_input,
        design.n_rows_missing,
        n_singletons,
        k_effective,
        opts.keep_residuals.then(|| ls.residuals.clone()),
        fixed_effects,
    ))
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    spec: &ModelSpec,
    d: &DesignMatrix,
    ls: &LeastSquares,
    v: &DMatrix<f64>,
    se_classical: f64,
    n_obs_input: usize,
    n_obs_missing: usize,
    n_singletons: usize,
    k_effective: usize,
    residuals: Option<Vec<f64>>,
    fixed_effects: Option<Vec<(DriverId, f64)>>,
) -> FitResult {
    let names = d.regressor_names();
    let coefficients: Vec<Coefficient> = ls
        .kept
        .iter()
        .enumerate()
        .map(|(i, &c)| Coefficient { name: names[c].clone(), estimate: ls.coef[i], std_error: v[(i, i)].sqrt() })
        .collect();
    let t = ls.position(0).expect("treatment retained");
    let (delta_hat, se_delta) = (ls.coef[t], v[(t, t)].sqrt());
    let (ci95, p_value) = wald(delta_hat, se_delta);
    FitResult {
        label: spec.label(),
        estimator: spec.estimator,
        outcome: spec.outcome,
        delta_hat,
        se_delta,
        ci95,
        p_value,
        variance: spec.variance_kind(),
        coefficients,
        dropped_collinear: ls.dropped.iter().map(|&c| names[c].clone()).collect(),
        n_obs_input,
        n_obs_missing,
        n_obs_used: d.n_rows(),
        n_drivers_used: d.drivers.n_levels(),
        n_clusters: d.clusters.n_levels(),
        n_singletons_dropped: n_singletons,
        n_strata_dropped: 0,
        n_separated_dropped: 0,
        k_effective,
        se_classical: Some(se_classical),
        log_likelihood: None,
        convergence: Convergence { iterations: 1, gradient_norm: 0.0, converged: true },
        residuals,
        fixed_effects,
    }
}

/// Driver intercepts from `y - X b` on the untransformed design. With
/// further absorbed dimensions the combined fixed-effect component is split
/// by backfitting, which pins the split up to the usual normalization
/// (each later dimension absorbs any common shift).
fn recover_driver_effects(d: &DesignMatrix, ls: &LeastSquares) -> Result<Vec<(DriverId, f64)>> {
    let n = d.n_rows();
    let regs = d.regressors();
    let mut target = d.y.clone();
    for (i, &c) in ls.kept.iter().enumerate() {
        for (t, xv) in target.iter_mut().zip(regs[c]) {
            *t -= ls.coef[i] * xv;
        }
    }
    // target = sum of fixed-effect components + residual
    for (t, e) in target.iter_mut().zip(&ls.residuals) {
        *t -= e;
    }
    let dims = &d.fixed_effects;
    let driver_dim = 0;
    let mut comps: Vec<Vec<f64>> = vec![vec![0.0; n]; dims.len()];
    let scale = target.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut converged = dims.len() == 1;
    let sweeps = if dims.len() == 1 { 1 } else { MAX_PROJECTION_ITERATIONS };
    for _ in 0..sweeps {
        let mut change = 0.0_f64;
        for k in 0..dims.len() {
            let mut partial: Vec<f64> = target.clone();
            for (j, c) in comps.iter().enumerate() {
                if j != k {
                    partial.iter_mut().zip(c).for_each(|(p, v)| *p -= v);
                }
            }
            let single = std::slice::from_ref(&dims[k]);
            let mut demeaned = partial.clone();
            Absorber::new(single, None).demean(&mut demeaned)?;
            let new: Vec<f64> = partial.iter().zip(&demeaned).map(|(p, q)| p - q).collect();
            change = change.max(new.iter().zip(&comps[k]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
            comps[k] = new;
        }
        if change <= PROJECTION_TOL * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            message: "fixed-effect recovery did not converge".into(),
            last_residual: f64::NAN,
        });
    }
    debug_assert_eq!(d.fixed_effects[driver_dim].name, FeDim::Driver.name());
    let f = &d.drivers;
    let mut effects = vec![0.0; f.n_levels()];
    for (&g, v) in f.codes.iter().zip(&comps[driver_dim]) {
        effects[g as usize] = *v;
    }
    f.labels
        .iter()
        .zip(effects)
        .map(|(l, a)| Ok((l.parse::<DriverId>()?, a)))
        .collect()
}

/// Pooled OLS of the outcome on an intercept, the treatment and the
/// dummy-coded controls, without driver effects, clustered by driver. Used
/// as a comparison for the within-driver estimate.
pub fn fit_pooled_ols(panels: &[DriverPanel], spec: &ModelSpec) -> Result<FitResult> {
    if spec.fe_dims != [FeDim::Driver] {
        return Err(Error::Specification("pooled OLS supports only specs that absorb the driver alone".into()));
    }
    let mut d = build_design(panels, spec)?;
    if d.n_rows() == 0 {
        return Err(Error::EmptySample("no usable stops".into()));
    }
    let n = d.n_rows();
    d.fixed_effects.clear();
    d.controls.insert(0, vec![1.0; n]);
    d.control_names.insert(0, "intercept".into());
    let x = columns_to_matrix(&d.regressors(), n);
    let ls = least_squares(&x, &d.y, COLLINEARITY_TOL);
    if ls.position(0).is_none() {
        return Err(Error::Identification("treatment is constant in the sample".into()));
    }
    let k = ls.kept.len();
    let rss: f64 = ls.residuals.iter().map(|e| e * e).sum();
    if n <= k {
        return Err(Error::Inference(format!("no residual degrees of freedom: {n} rows, {k} parameters")));
    }
    let v_classical = &ls.xtx_inv * (rss / (n - k) as f64);
    let v = match spec.variance_kind() {
        VarianceKind::Classical => v_classical.clone(),
        VarianceKind::ClusterRobust => {
            cluster_robust_vcov(&x.select_columns(&ls.kept), &ls.residuals, &d.clusters, &ls.xtx_inv, k)?
        }
    };
    let mut r = assemble(spec, &d, &ls, &v, v_classical[(0, 0)].sqrt(), d.n_rows_input, d.n_rows_missing, 0, k, None, None);
    r.label = format!("pooled OLS | {}", r.label);
    Ok(r)
}
