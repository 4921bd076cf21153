//! Grouping stops into per-person panels by exact composite key.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{PerceivedRace, State, StateConfig, StopRecord};

/// Panels with more stops than this are treated as merged identities.
pub const MAX_STOPS_PER_DRIVER: usize = 10;

/// Normalized composite identity key. Keys from different states never
/// compare equal because the state is part of the key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DriverKey {
    pub state: State,
    pub components: Vec<String>,
}

impl DriverKey {
    /// Builds the key for a record, or `None` if any component is missing.
    pub fn from_record(rec: &StopRecord) -> Option<Self> {
        if rec.link_fields.is_empty() {
            return None;
        }
        let components = rec
            .link_fields
            .iter()
            .map(|f| f.as_ref().filter(|s| !s.is_empty()).cloned())
            .collect::<Option<Vec<_>>>()?;
        Some(DriverKey { state: rec.state, components })
    }

    pub fn driver_id(&self) -> DriverId {
        let mut h = Sha256::new();
        h.update(b"key\x1f");
        h.update(self.state.code().as_bytes());
        for c in &self.components {
            h.update(b"\x1f");
            h.update(c.as_bytes());
        }
        DriverId::from_digest(&h.finalize())
    }
}

/// Content-derived driver identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct DriverId(pub u128);

impl DriverId {
    fn from_digest(d: &[u8]) -> Self {
        let mut b = [0u8; 16];
        b.copy_from_slice(&d[..16]);
        DriverId(u128::from_be_bytes(b))
    }

    /// Identifier for a stop that could not be linked to anyone.
    pub fn unlinkable(state: State, stop_id: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"unlinkable\x1f");
        h.update(state.code().as_bytes());
        h.update(b"\x1f");
        h.update(stop_id.as_bytes());
        DriverId::from_digest(&h.finalize())
    }

    /// Identifier derived from an arbitrary label, used by the simulator.
    pub fn from_label(label: &str) -> Self {
        DriverId::from_digest(&Sha256::digest(label.as_bytes()))
    }
}

impl fmt::Display for DriverId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl FromStr for DriverId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        u128::from_str_radix(s.trim(), 16)
            .map(DriverId)
            .map_err(|_| Error::Config(format!("invalid driver id `{s}`")))
    }
}

impl From<DriverId> for String {
    fn from(d: DriverId) -> String {
        d.to_string()
    }
}

impl TryFrom<String> for DriverId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// All stops attributed to one person, ordered by date then stop id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverPanel {
    pub driver_id: DriverId,
    pub state: State,
    /// False for singleton panels built from records with an incomplete key.
    pub linkable: bool,
    pub stops: Vec<StopRecord>,
}

impl DriverPanel {
    pub fn new(driver_id: DriverId, state: State, linkable: bool, mut stops: Vec<StopRecord>) -> Self {
        sort_stops(&mut stops);
        DriverPanel { driver_id, state, linkable, stops }
    }

    pub fn n_stops(&self) -> usize {
        self.stops.len()
    }

    pub fn races(&self) -> BTreeSet<PerceivedRace> {
        self.stops.iter().map(|s| s.perceived_race).collect()
    }
}

pub(crate) fn sort_stops(stops: &mut [StopRecord]) {
    stops.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.stop_id.cmp(&b.stop_id)));
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkageReport {
    pub n_stops: usize,
    pub n_linkable: usize,
    pub n_drivers: usize,
    /// Percent of drivers with at least two stops, before overmatch removal.
    pub pct_multiply_stopped: f64,
    pub n_removed_overmatch: usize,
}

impl LinkageReport {
    pub fn key_availability(&self) -> f64 {
        if self.n_stops == 0 {
            0.0
        } else {
            self.n_linkable as f64 / self.n_stops as f64
        }
    }
}

/// Groups records with identical [`DriverKey`] into panels.
///
/// Records with an incomplete key become singleton panels flagged
/// `linkable = false`. Output is sorted by driver id, so it does not depend
/// on input order.
pub fn link_drivers(records: Vec<StopRecord>, config: &StateConfig) -> Result<(Vec<DriverPanel>, LinkageReport)> {
    let n_components = config.link_key.len();
    let mut groups: BTreeMap<DriverKey, Vec<StopRecord>> = BTreeMap::new();
    let mut panels = Vec::new();
    let n_stops = records.len();
    let mut n_linkable = 0;

    for rec in records {
        if rec.state != config.state {
            return Err(Error::Config(format!(
                "record {} is from {} but the linkage config is for {}",
                rec.stop_id, rec.state, config.state
            )));
        }
        match DriverKey::from_record(&rec).filter(|k| k.components.len() == n_components) {
            Some(key) => {
                n_linkable += 1;
                groups.entry(key).or_default().push(rec);
            }
            None => {
                let id = DriverId::unlinkable(rec.state, &rec.stop_id);
                panels.push(DriverPanel::new(id, rec.state, false, vec![rec]));
            }
        }
    }
    panels.extend(groups.into_iter().map(|(key, stops)| DriverPanel::new(key.driver_id(), key.state, true, stops)));
    panels.sort_by_key(|p| p.driver_id);

    let n_multi = panels.iter().filter(|p| p.n_stops() >= 2).count();
    let report = LinkageReport {
        n_stops,
        n_linkable,
        n_drivers: panels.len(),
        pct_multiply_stopped: if panels.is_empty() { 0.0 } else { 100.0 * n_multi as f64 / panels.len() as f64 },
        n_removed_overmatch: 0,
    };
    Ok((panels, report))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OvermatchReport {
    pub n_removed: usize,
    pub n_stops_removed: usize,
    pub fraction_removed: f64,
}

/// Drops every panel with more than [`MAX_STOPS_PER_DRIVER`] stops.
pub fn remove_overmatched(panels: Vec<DriverPanel>) -> (Vec<DriverPanel>, OvermatchReport) {
    let n = panels.len();
    let (kept, removed): (Vec<_>, Vec<_>) = panels.into_iter().partition(|p| p.n_stops() <= MAX_STOPS_PER_DRIVER);
    let report = OvermatchReport {
        n_removed: removed.len(),
        n_stops_removed: removed.iter().map(DriverPanel::n_stops).sum(),
        fraction_removed: if n == 0 { 0.0 } else { removed.len() as f64 / n as f64 },
    };
    (kept, report)
}
