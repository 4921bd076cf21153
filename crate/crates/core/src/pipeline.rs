//! Raw state table to linked driver panels in one call.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ingest::{apply_validity_filters, load_stops, FilterReport, Rejection, StateConfig};
use crate::linkage::{link_drivers, remove_overmatched, DriverPanel, LinkageReport, OvermatchReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub n_rows: usize,
    pub n_rejected: usize,
    pub filters: FilterReport,
    pub linkage: LinkageReport,
    pub overmatch: OvermatchReport,
}

#[derive(Debug, Clone)]
pub struct PreparedState {
    pub panels: Vec<DriverPanel>,
    pub rejections: Vec<Rejection>,
    pub summary: StateSummary,
}

/// Loads, filters, links and removes over-matched drivers.
pub fn prepare_state(path: &Path, config: &StateConfig) -> Result<PreparedState> {
    let loaded = load_stops(path, config)?;
    let (records, filters) = apply_validity_filters(loaded.records);
    let (panels, linkage) = link_drivers(records, config)?;
    let (panels, overmatch) = remove_overmatched(panels);
    Ok(PreparedState {
        panels,
        summary: StateSummary { n_rows: loaded.n_rows, n_rejected: loaded.rejections.len(), filters, linkage, overmatch },
        rejections: loaded.rejections,
    })
}
