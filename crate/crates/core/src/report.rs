//! Report assembly: cohort table plus a battery of model fits, and flat
//! plot data (one row per fit) for external plotting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cohort::CohortStats;
use crate::error::Result;
use crate::estimators::{fit, Control, Estimator, FitResult, ModelSpec, Outcome};
use crate::ingest::State;
use crate::linkage::DriverPanel;

/// A model to fit and the states whose stops enter it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryEntry {
    pub spec: ModelSpec,
    pub states: Vec<State>,
}

impl BatteryEntry {
    pub fn label(&self) -> String {
        let states: Vec<&str> = self.states.iter().map(|s| s.code()).collect();
        format!("{} | {}", self.spec.label(), states.join("+"))
    }
}

/// The standard set of fits for the states present: search estimates under
/// each control set for every family, duration for Arizona, and arrests
/// for states that record them.
pub fn standard_battery(states: &[State]) -> Vec<BatteryEntry> {
    let mut out = Vec::new();
    let all = states.to_vec();
    let control_sets: [&[Control]; 4] =
        [&[], &[Control::LocationTime], &[Control::Officer], &[Control::LocationTime, Control::Officer]];
    for est in [Estimator::LinearFe, Estimator::FeglmLogit, Estimator::ConditionalLogit] {
        for cs in control_sets {
            out.push(BatteryEntry { spec: ModelSpec::new(est, Outcome::Searched, cs.iter().copied()), states: all.clone() });
        }
    }
    if states.contains(&State::Az) {
        out.push(BatteryEntry {
            spec: ModelSpec::new(Estimator::LinearFe, Outcome::Searched, [Control::Duration]),
            states: vec![State::Az],
        });
    }
    let arrest_states: Vec<State> = states.iter().copied().filter(|s| s.records_arrests()).collect();
    if !arrest_states.is_empty() {
        for cs in control_sets {
            out.push(BatteryEntry {
                spec: ModelSpec::new(Estimator::LinearFe, Outcome::Arrested, cs.iter().copied()),
                states: arrest_states.clone(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedFit {
    pub label: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub cohort: Option<CohortStats>,
    pub fits: Vec<FitResult>,
    pub failures: Vec<FailedFit>,
}

/// Fits every entry on the panels from its states. A failing fit is
/// recorded with its error and does not stop the rest.
pub fn run_battery(panels: &[DriverPanel], battery: &[BatteryEntry], cohort: Option<CohortStats>) -> Report {
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    for entry in battery {
        let subset: Vec<DriverPanel> = panels.iter().filter(|p| entry.states.contains(&p.state)).cloned().collect();
        match fit(&subset, &entry.spec) {
            Ok(mut r) => {
                r.label = entry.label();
                fits.push(r);
            }
            Err(e) => failures.push(FailedFit { label: entry.label(), error: e.to_string() }),
        }
    }
    Report { cohort, fits, failures }
}

/// One point of a coefficient plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub label: String,
    pub estimator: String,
    pub outcome: String,
    /// `probability` for the linear family, `log_odds` otherwise.
    pub scale: String,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub std_error: f64,
    pub p_value: f64,
    pub n_obs: usize,
    pub n_drivers: usize,
}

impl From<&FitResult> for PlotRow {
    fn from(r: &FitResult) -> Self {
        PlotRow {
            label: r.label.clone(),
            estimator: r.estimator.short_name().into(),
            outcome: match r.outcome {
                Outcome::Searched => "search".into(),
                Outcome::Arrested => "arrest".into(),
            },
            scale: if r.estimator == Estimator::LinearFe { "probability" } else { "log_odds" }.into(),
            estimate: r.delta_hat,
            ci_lo: r.ci95.0,
            ci_hi: r.ci95.1,
            std_error: r.se_delta,
            p_value: r.p_value,
            n_obs: r.n_obs_used,
            n_drivers: r.n_drivers_used,
        }
    }
}

pub fn plot_rows(fits: &[FitResult]) -> Vec<PlotRow> {
    fits.iter().map(PlotRow::from).collect()
}

pub fn plot_data_csv(rows: &[PlotRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| crate::error::Error::io("<plot data>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Estimates in display units: percentage points for the linear family,
/// log-odds otherwise.
fn display(r: &FitResult, v: f64) -> String {
    if r.estimator == Estimator::LinearFe {
        format!("{:+.2} pp", 100.0 * v)
    } else {
        format!("{v:+.3}")
    }
}

impl Report {
    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(c) = &self.cohort {
            out.push_str(&c.render_table());
            out.push('\n');
        }
        out.push_str("Estimates (95% CI, driver-clustered unless noted)\n\n");
        let width = self.fits.iter().map(|f| f.label.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>22}  {:>9}  {:>8}  {:>8}", "model", "estimate", "95% CI", "p", "N", "drivers");
        for f in &self.fits {
            let ci = format!("({}, {})", display(f, f.ci95.0), display(f, f.ci95.1));
            let _ = writeln!(
                out,
                "{:<width$}  {:>10}  {:>22}  {:>9.2e}  {:>8}  {:>8}",
                f.label,
                display(f, f.delta_hat),
                ci,
                f.p_value,
                f.n_obs_used,
                f.n_drivers_used
            );
        }
        if !self.failures.is_empty() {
            out.push_str("\nNot estimated\n\n");
            for f in &self.failures {
                let _ = writeln!(out, "{}: {}", f.label, f.error);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_panel, SimConfig};

    #[test]
    fn battery_respects_state_coverage() {
        let b = standard_battery(&[State::Co, State::Tx]);
        assert!(b.iter().all(|e| !e.spec.controls.contains(&Control::Duration)));
        let arrests: Vec<_> = b.iter().filter(|e| e.spec.outcome == Outcome::Arrested).collect();
        assert!(!arrests.is_empty());
        assert!(arrests.iter().all(|e| e.states == vec![State::Co]));
        assert!(standard_battery(&[State::Tx]).iter().all(|e| e.spec.outcome == Outcome::Searched));
    }

    #[test]
    fn plot_data_has_a_row_per_fit() {
        let (panels, _) = generate_panel(&SimConfig::taste_preset(400, 11)).unwrap();
        let battery = standard_battery(&[State::Az]);
        let report = run_battery(&panels, &battery, None);
        assert_eq!(report.fits.len() + report.failures.len(), battery.len());
        let rows = plot_rows(&report.fits);
        let csv = plot_data_csv(&rows).unwrap();
        assert_eq!(csv.lines().count(), rows.len() + 1);
        assert!(csv.starts_with("label,estimator,outcome,scale,estimate,ci_lo,ci_hi"));
        for r in &rows {
            assert!(r.ci_lo <= r.estimate && r.estimate <= r.ci_hi);
        }
        assert!(report.render().contains("Estimates"));
    }
}
