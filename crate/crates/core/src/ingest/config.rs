use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{PerceivedRace, State};
use crate::error::{Error, Result};

/// Where an optional [`super::StopRecord`] field comes from.
///
/// In TOML either a column name (`hour = "time"`) or the explicit marker
/// `hour = { absent = true }`. Optional fields have no default: a config that
/// says nothing about a field is rejected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSource {
    Column(String),
    Absent { absent: bool },
}

impl FieldSource {
    pub fn column(&self) -> Option<&str> {
        match self {
            FieldSource::Column(c) => Some(c),
            FieldSource::Absent { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub stop_id: String,
    pub date: String,
    pub perceived_race: String,
    pub searched: String,
    pub hour: FieldSource,
    pub county: FieldSource,
    pub officer_id: FieldSource,
    pub arrested: FieldSource,
    pub duration_minutes: FieldSource,
}

/// One component of the driver linkage key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkKeyField {
    /// Display name, e.g. `first_name`.
    pub component: String,
    pub column: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DateRange {
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
}

impl DateRange {
    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start.is_none_or(|s| d >= s) && self.end.is_none_or(|e| d <= e)
    }
}

/// Per-state mapping from a raw stop table onto canonical records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateConfig {
    pub state: State,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_date_format")]
    pub date_format: String,
    pub columns: ColumnMap,
    /// Raw label (matched case-insensitively) to canonical category.
    #[serde(default)]
    pub race_labels: BTreeMap<String, PerceivedRace>,
    #[serde(default)]
    pub date_filter: DateRange,
    pub link_key: Vec<LinkKeyField>,
}

fn default_delimiter() -> char {
    ','
}

fn default_date_format() -> String {
    "%Y-%m-%d".to_string()
}

impl StateConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut cfg: StateConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("invalid state config: {e}")))?;
        cfg.race_labels = cfg.race_labels.into_iter().map(|(k, v)| (k.trim().to_lowercase(), v)).collect();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.delimiter.is_ascii() {
            return Err(Error::Config("delimiter must be a single ASCII character".into()));
        }
        let c = &self.columns;
        for (name, src) in [
            ("hour", &c.hour),
            ("county", &c.county),
            ("officer_id", &c.officer_id),
            ("arrested", &c.arrested),
            ("duration_minutes", &c.duration_minutes),
        ] {
            if let FieldSource::Absent { absent: false } = src {
                return Err(Error::Config(format!(
                    "field `{name}` has `absent = false`; give a column name instead"
                )));
            }
        }
        if !self.state.records_arrests() && c.arrested.column().is_some() {
            return Err(Error::Config(format!("{} does not record arrests; mark `arrested` absent", self.state)));
        }
        if !self.state.records_duration() && c.duration_minutes.column().is_some() {
            return Err(Error::Config(format!(
                "{} does not record stop duration; mark `duration_minutes` absent",
                self.state
            )));
        }
        if self.link_key.is_empty() {
            return Err(Error::Config("link_key must name at least one column".into()));
        }
        for (raw, mapped) in &self.race_labels {
            if let Some(canonical) = PerceivedRace::from_canonical(raw) {
                if canonical != *mapped {
                    return Err(Error::Config(format!(
                        "race label `{raw}` is a canonical name and cannot map to `{mapped}`"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every column the header must contain.
    pub fn required_columns(&self) -> Vec<&str> {
        let c = &self.columns;
        let mut cols = vec![c.stop_id.as_str(), c.date.as_str(), c.perceived_race.as_str(), c.searched.as_str()];
        cols.extend(
            [&c.hour, &c.county, &c.officer_id, &c.arrested, &c.duration_minutes]
                .into_iter()
                .filter_map(FieldSource::column),
        );
        cols.extend(self.link_key.iter().map(|k| k.column.as_str()));
        cols
    }
}
