//! Person fixed-effects estimators of the treatment coefficient.
//!
//! The treatment indicator is 1 when a stop's perceived race is Hispanic.
//! Three families share one design builder:
//!
//! * [`fit_linear_fe`]: linear probability model with absorbed fixed
//!   effects and cluster-robust variance.
//! * [`fit_feglm_logit`]: logit GLM with driver intercepts absorbed inside
//!   IRLS.
//! * [`fit_conditional_logit`]: conditional logit with one stratum per
//!   driver, exact conditional likelihood.

mod absorb;
mod clogit;
mod design;
mod feglm;
mod linear;
mod vcov;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

pub use absorb::{absorb_fixed_effects, absorbed_dof, Absorber, MAX_PROJECTION_ITERATIONS, PROJECTION_TOL};
pub use clogit::{fit_conditional_logit, ClogitEvaluation, ClogitFit, ClogitProblem, Stratum};
pub use design::{build_design, hour_bin, DesignMatrix, Factor};
pub use feglm::{fit_feglm_logit, LogitFeProblem};
pub use clogit::fit_conditional_logit_design;
pub use linear::{fit_linear_design, fit_linear_fe, fit_linear_fe_with, fit_pooled_ols};
pub use vcov::{cluster_robust_vcov, cluster_sandwich, cluster_scores, small_sample_factor};

use crate::error::{Error, Result};
use crate::linkage::{DriverId, DriverPanel};

/// Normal critical value for two-sided 95% intervals.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Searched,
    Arrested,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Control {
    /// County, stop year, quarter, weekday and three-hour bin.
    LocationTime,
    Officer,
    /// Stop duration in minutes; Arizona only.
    Duration,
}

/// Categorical dimensions that can be absorbed instead of dummy-coded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeDim {
    Driver,
    Officer,
    County,
    Year,
    Quarter,
    Weekday,
    HourBin,
}

impl FeDim {
    pub fn name(self) -> &'static str {
        match self {
            FeDim::Driver => "driver",
            FeDim::Officer => "officer",
            FeDim::County => "county",
            FeDim::Year => "year",
            FeDim::Quarter => "quarter",
            FeDim::Weekday => "weekday",
            FeDim::HourBin => "hour_bin",
        }
    }

    /// The control set that brings this dimension into the model when it is
    /// not absorbed.
    fn control(self) -> Option<Control> {
        match self {
            FeDim::Driver => None,
            FeDim::Officer => Some(Control::Officer),
            _ => Some(Control::LocationTime),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    LinearFe,
    FeglmLogit,
    ConditionalLogit,
}

impl Estimator {
    pub fn short_name(self) -> &'static str {
        match self {
            Estimator::LinearFe => "linear",
            Estimator::FeglmLogit => "feglm",
            Estimator::ConditionalLogit => "clogit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterDim {
    Driver,
    Officer,
    County,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    ClusterRobust,
    /// Homoskedastic OLS variance, or inverse observed information for the
    /// logit families.
    Classical,
}

/// How absorbed fixed effects enter `k_effective` in the small-sample factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DofRule {
    /// Fixed-effect dimensions nested within the cluster dimension add no
    /// degrees of freedom.
    NestedExcluded,
    /// Every absorbed level counts, less redundant levels.
    CountAll,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub outcome: Outcome,
    pub controls: BTreeSet<Control>,
    /// Absorbed dimensions. Controls whose categorical appears here are
    /// absorbed rather than dummy-coded.
    pub fe_dims: Vec<FeDim>,
    pub estimator: Estimator,
    pub cluster: ClusterDim,
    /// `None` picks the family default: cluster-robust for the linear and
    /// FE-GLM families, inverse information for conditional logit.
    pub variance: Option<VarianceKind>,
    pub dof_rule: DofRule,
}

impl ModelSpec {
    /// Spec with the defaults of each family: driver absorbed for the linear
    /// and FE-GLM families (and officer as well for the linear family when
    /// the officer control is requested), nothing absorbed for conditional
    /// logit, driver clustering.
    pub fn new(estimator: Estimator, outcome: Outcome, controls: impl IntoIterator<Item = Control>) -> Self {
        let controls: BTreeSet<Control> = controls.into_iter().collect();
        let fe_dims = match estimator {
            Estimator::LinearFe if controls.contains(&Control::Officer) => vec![FeDim::Driver, FeDim::Officer],
            Estimator::LinearFe | Estimator::FeglmLogit => vec![FeDim::Driver],
            Estimator::ConditionalLogit => vec![],
        };
        ModelSpec {
            outcome,
            controls,
            fe_dims,
            estimator,
            cluster: ClusterDim::Driver,
            variance: None,
            dof_rule: DofRule::NestedExcluded,
        }
    }

    pub fn variance_kind(&self) -> VarianceKind {
        self.variance.unwrap_or(match self.estimator {
            Estimator::ConditionalLogit => VarianceKind::Classical,
            _ => VarianceKind::ClusterRobust,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for d in &self.fe_dims {
            if !seen.insert(*d) {
                return Err(Error::Specification(format!("fixed-effect dimension `{}` listed twice", d.name())));
            }
            if let Some(c) = d.control() {
                if !self.controls.contains(&c) {
                    return Err(Error::Specification(format!(
                        "`{}` is absorbed but its control set is not active",
                        d.name()
                    )));
                }
            }
        }
        match self.estimator {
            Estimator::LinearFe => {
                if !self.fe_dims.contains(&FeDim::Driver) {
                    return Err(Error::Specification("linear_fe requires the driver fixed effect".into()));
                }
            }
            Estimator::FeglmLogit => {
                if self.fe_dims != [FeDim::Driver] {
                    return Err(Error::Specification(
                        "feglm_logit absorbs exactly the driver dimension; other categoricals are dummy-coded".into(),
                    ));
                }
            }
            Estimator::ConditionalLogit => {
                if !self.fe_dims.is_empty() {
                    return Err(Error::Specification(
                        "conditional_logit stratifies on driver and absorbs no dimension".into(),
                    ));
                }
                if self.cluster != ClusterDim::Driver && self.variance_kind() == VarianceKind::ClusterRobust {
                    return Err(Error::Specification("conditional_logit clusters only over driver strata".into()));
                }
            }
        }
        Ok(())
    }

    /// Short human-readable description, used as the plot-data label.
    pub fn label(&self) -> String {
        let mut parts = vec!["driver FE".to_string()];
        for c in &self.controls {
            let absorbed = self.fe_dims.iter().any(|d| d.control() == Some(*c));
            parts.push(match (c, absorbed) {
                (Control::LocationTime, false) => "location/time".into(),
                (Control::LocationTime, true) => "location/time (absorbed)".into(),
                (Control::Officer, false) => "officer".into(),
                (Control::Officer, true) => "officer FE".into(),
                (Control::Duration, _) => "duration".into(),
            });
        }
        let outcome = match self.outcome {
            Outcome::Searched => "search",
            Outcome::Arrested => "arrest",
        };
        format!("{} | {} | {}", self.estimator.short_name(), outcome, parts.join(" + "))
    }
}

impl FromStr for Control {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loctime" | "location_time" => Ok(Control::LocationTime),
            "officer" => Ok(Control::Officer),
            "duration" => Ok(Control::Duration),
            other => Err(Error::Specification(format!("unknown control set `{other}`"))),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitOptions {
    pub keep_residuals: bool,
    pub recover_fixed_effects: bool,
}

/// Estimate of the treatment coefficient and its diagnostics.
///
/// `delta_hat` is on the outcome's own scale: a probability difference for
/// the linear family (multiply by 100 for percentage points) and log-odds
/// for the logit families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub label: String,
    pub estimator: Estimator,
    pub outcome: Outcome,
    pub delta_hat: f64,
    pub se_delta: f64,
    pub ci95: (f64, f64),
    pub p_value: f64,
    pub variance: VarianceKind,
    /// Treatment first, then retained controls.
    pub coefficients: Vec<Coefficient>,
    pub dropped_collinear: Vec<String>,
    pub n_obs_input: usize,
    pub n_obs_missing: usize,
    pub n_obs_used: usize,
    pub n_drivers_used: usize,
    pub n_clusters: usize,
    pub n_singletons_dropped: usize,
    pub n_strata_dropped: usize,
    pub n_separated_dropped: usize,
    pub k_effective: usize,
    /// Homoskedastic standard error, linear family only.
    pub se_classical: Option<f64>,
    pub log_likelihood: Option<f64>,
    pub convergence: Convergence,
    pub residuals: Option<Vec<f64>>,
    pub fixed_effects: Option<Vec<(DriverId, f64)>>,
}

/// Two-sided normal p-value for `z`.
pub fn normal_p_value(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

pub(crate) fn wald(estimate: f64, se: f64) -> ((f64, f64), f64) {
    ((estimate - Z_95 * se, estimate + Z_95 * se), normal_p_value(estimate / se))
}

/// Dispatches on `spec.estimator`.
pub fn fit(panels: &[DriverPanel], spec: &ModelSpec) -> Result<FitResult> {
    match spec.estimator {
        Estimator::LinearFe => fit_linear_fe(panels, spec),
        Estimator::FeglmLogit => fit_feglm_logit(panels, spec),
        Estimator::ConditionalLogit => fit_conditional_logit(panels, spec),
    }
}
