use std::collections::{BTreeMap, BTreeSet};

use chrono::Datelike;

use super::{ClusterDim, Control, FeDim, ModelSpec, Outcome};
use crate::error::{Error, Result};
use crate::ingest::{State, StopRecord};
use crate::linkage::{DriverId, DriverPanel};

/// Index of the three-hour bin containing `hour`: `[0,3) -> 0`, ..., `[21,24) -> 7`.
pub fn hour_bin(hour: u8) -> u8 {
    hour / 3
}

/// A categorical variable coded `0..n_levels`, levels in sorted label order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Factor {
    pub name: String,
    pub codes: Vec<u32>,
    pub labels: Vec<String>,
}

impl Factor {
    pub fn from_labels(name: &str, values: &[String]) -> Self {
        let labels: Vec<String> = values.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let index: BTreeMap<&str, u32> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i as u32)).collect();
        let codes = values.iter().map(|v| index[v.as_str()]).collect();
        Factor { name: name.to_string(), codes, labels }
    }

    pub fn n_levels(&self) -> usize {
        self.labels.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_levels()];
        for &g in &self.codes {
            c[g as usize] += 1;
        }
        c
    }

    /// Restricts to `rows` and drops levels that no longer occur.
    pub fn subset(&self, rows: &[usize]) -> Factor {
        let values: Vec<String> = rows.iter().map(|&i| self.labels[self.codes[i] as usize].clone()).collect();
        Factor::from_labels(&self.name, &values)
    }

    /// True when every level of `self` falls within a single level of `outer`.
    pub fn nested_in(&self, outer: &Factor) -> bool {
        let mut owner: Vec<Option<u32>> = vec![None; self.n_levels()];
        for (&g, &o) in self.codes.iter().zip(&outer.codes) {
            match owner[g as usize] {
                None => owner[g as usize] = Some(o),
                Some(prev) if prev != o => return false,
                Some(_) => {}
            }
        }
        true
    }
}

/// Regression inputs for one model, rows in canonical order (driver id,
/// then date, then stop id).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub y: Vec<f64>,
    /// 1 when the stop's perceived race is Hispanic.
    pub treatment: Vec<f64>,
    /// Control columns; dummies omit the first (reference) level.
    pub controls: Vec<Vec<f64>>,
    pub control_names: Vec<String>,
    /// Absorbed dimensions, in `ModelSpec::fe_dims` order.
    pub fixed_effects: Vec<Factor>,
    pub drivers: Factor,
    pub clusters: Factor,
    pub provenance: Vec<(DriverId, String)>,
    pub n_rows_input: usize,
    /// Rows removed because an active column was missing.
    pub n_rows_missing: usize,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    /// Treatment followed by the controls.
    pub fn regressors(&self) -> Vec<&[f64]> {
        std::iter::once(self.treatment.as_slice()).chain(self.controls.iter().map(Vec::as_slice)).collect()
    }

    pub fn regressor_names(&self) -> Vec<String> {
        std::iter::once("hispanic".to_string()).chain(self.control_names.iter().cloned()).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> DesignMatrix {
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        DesignMatrix {
            y: pick(&self.y),
            treatment: pick(&self.treatment),
            controls: self.controls.iter().map(|c| pick(c)).collect(),
            control_names: self.control_names.clone(),
            fixed_effects: self.fixed_effects.iter().map(|f| f.subset(rows)).collect(),
            drivers: self.drivers.subset(rows),
            clusters: self.clusters.subset(rows),
            provenance: rows.iter().map(|&i| self.provenance[i].clone()).collect(),
            n_rows_input: self.n_rows_input,
            n_rows_missing: self.n_rows_missing,
        }
    }
}

fn categorical_value(dim: FeDim, stop: &StopRecord, driver: DriverId) -> Option<String> {
    Some(match dim {
        FeDim::Driver => driver.to_string(),
        FeDim::Officer => stop.officer_id.clone()?,
        FeDim::County => stop.county.clone()?,
        FeDim::Year => stop.date.year().to_string(),
        FeDim::Quarter => stop.date.quarter().to_string(),
        FeDim::Weekday => stop.date.weekday().number_from_monday().to_string(),
        FeDim::HourBin => hour_bin(stop.hour?).to_string(),
    })
}

const LOCATION_TIME: [FeDim; 5] = [FeDim::County, FeDim::Year, FeDim::Quarter, FeDim::Weekday, FeDim::HourBin];

/// Builds the regression inputs for `spec` from `panels`.
///
/// Rows with a missing value in any column the spec uses are removed and
/// counted; columns the spec does not use never cause deletion.
pub fn build_design(panels: &[DriverPanel], spec: &ModelSpec) -> Result<DesignMatrix> {
    spec.validate()?;
    let mut rows: Vec<(DriverId, &StopRecord)> =
        panels.iter().flat_map(|p| p.stops.iter().map(move |s| (p.driver_id, s))).collect();
    rows.sort_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| a.1.date.cmp(&b.1.date)).then_with(|| a.1.stop_id.cmp(&b.1.stop_id))
    });

    if spec.controls.contains(&Control::Duration) {
        if let Some((_, s)) = rows.iter().find(|(_, s)| !s.state.records_duration()) {
            return Err(Error::Specification(format!(
                "duration control requested but stop {} is from {}, which does not record duration",
                s.stop_id, s.state
            )));
        }
    }
    if spec.outcome == Outcome::Arrested && rows.iter().any(|(_, s)| s.state == State::Tx) {
        return Err(Error::Specification("arrest outcome requested but Texas does not record arrests".into()));
    }

    let mut categorical: Vec<FeDim> = Vec::new();
    if spec.controls.contains(&Control::LocationTime) {
        categorical.extend(LOCATION_TIME);
    }
    if spec.controls.contains(&Control::Officer) {
        categorical.push(FeDim::Officer);
    }
    let cluster_dim = match spec.cluster {
        ClusterDim::Driver => FeDim::Driver,
        ClusterDim::Officer => FeDim::Officer,
        ClusterDim::County => FeDim::County,
    };
    let mut needed: Vec<FeDim> = Vec::new();
    for d in categorical.iter().chain(&spec.fe_dims).chain([&cluster_dim]) {
        if !needed.contains(d) {
            needed.push(*d);
        }
    }

    let n_rows_input = rows.len();
    let mut y = Vec::new();
    let mut treatment = Vec::new();
    let mut duration = Vec::new();
    let mut values: BTreeMap<FeDim, Vec<String>> = needed.iter().map(|d| (*d, Vec::new())).collect();
    let mut provenance = Vec::new();

    'rows: for (driver, stop) in &rows {
        let outcome = match spec.outcome {
            Outcome::Searched => Some(stop.searched),
            Outcome::Arrested => stop.arrested,
        };
        let Some(outcome) = outcome else { continue };
        let dur = if spec.controls.contains(&Control::Duration) {
            match stop.duration_minutes {
                Some(d) => Some(d),
                None => continue,
            }
        } else {
            None
        };
        let mut vals = Vec::with_capacity(needed.len());
        for &d in &needed {
            match categorical_value(d, stop, *driver) {
                Some(v) => vals.push(v),
                None => continue 'rows,
            }
        }
        for (d, v) in needed.iter().zip(vals) {
            values.get_mut(d).unwrap().push(v);
        }
        y.push(f64::from(u8::from(outcome)));
        treatment.push(f64::from(u8::from(stop.is_hispanic())));
        if let Some(d) = dur {
            duration.push(d);
        }
        provenance.push((*driver, stop.stop_id.clone()));
    }
    let mut controls = Vec::new();
    let mut control_names = Vec::new();
    for dim in &categorical {
        if spec.fe_dims.contains(dim) {
            continue;
        }
        let f = Factor::from_labels(dim.name(), &values[dim]);
        for (level, label) in f.labels.iter().enumerate().skip(1) {
            controls.push(f.codes.iter().map(|&c| f64::from(u8::from(c as usize == level))).collect());
            control_names.push(format!("{}={}", dim.name(), label));
        }
    }
    if spec.controls.contains(&Control::Duration) {
        controls.push(duration);
        control_names.push("duration_minutes".into());
    }

    Ok(DesignMatrix {
        n_rows_missing: n_rows_input - y.len(),
        y,
        treatment,
        controls,
        control_names,
        fixed_effects: spec.fe_dims.iter().map(|d| Factor::from_labels(d.name(), &values[d])).collect(),
        drivers: Factor::from_labels("driver", &provenance.iter().map(|(d, _)| d.to_string()).collect::<Vec<_>>()),
        clusters: Factor::from_labels(cluster_dim.name(), &values[&cluster_dim]),
        provenance,
        n_rows_input,
    })
}
