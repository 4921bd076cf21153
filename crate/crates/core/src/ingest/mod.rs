//! Raw stop tables to canonical [`StopRecord`]s.
//!
//! Each state ships its own column layout and race coding. A [`StateConfig`]
//! maps one layout onto the canonical record; [`load_stops`] parses a file
//! under that mapping and [`apply_validity_filters`] removes rows that must
//! not enter the analysis.

mod config;
mod load;
mod normalize;

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

pub use config::{FieldSource, LinkKeyField, StateConfig};
pub use load::{apply_validity_filters, load_stops, load_stops_from_reader, FilterReport, LoadOutput, Rejection};
pub use normalize::{normalize_link_field, normalize_race};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum State {
    #[serde(rename = "AZ")]
    Az,
    #[serde(rename = "CO")]
    Co,
    #[serde(rename = "TX")]
    Tx,
}

impl State {
    pub const ALL: [State; 3] = [State::Az, State::Co, State::Tx];

    pub fn code(self) -> &'static str {
        match self {
            State::Az => "AZ",
            State::Co => "CO",
            State::Tx => "TX",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            State::Az => "Arizona",
            State::Co => "Colorado",
            State::Tx => "Texas",
        }
    }

    /// Earliest date retained by [`apply_validity_filters`].
    ///
    /// Texas records before 2016 contain deliberate misrecording of driver
    /// race and are removed.
    pub fn min_valid_date(self) -> Option<NaiveDate> {
        match self {
            State::Tx => NaiveDate::from_ymd_opt(2016, 1, 1),
            _ => None,
        }
    }

    pub fn records_arrests(self) -> bool {
        self != State::Tx
    }

    pub fn records_duration(self) -> bool {
        self == State::Az
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for State {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "AZ" => Ok(State::Az),
            "CO" => Ok(State::Co),
            "TX" => Ok(State::Tx),
            other => Err(Error::Config(format!("unknown state `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceivedRace {
    White,
    Hispanic,
    Black,
    AsianPacific,
    Other,
    Unknown,
}

impl PerceivedRace {
    pub const ALL: [PerceivedRace; 6] = [
        PerceivedRace::White,
        PerceivedRace::Hispanic,
        PerceivedRace::Black,
        PerceivedRace::AsianPacific,
        PerceivedRace::Other,
        PerceivedRace::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerceivedRace::White => "white",
            PerceivedRace::Hispanic => "hispanic",
            PerceivedRace::Black => "black",
            PerceivedRace::AsianPacific => "asian_pacific",
            PerceivedRace::Other => "other",
            PerceivedRace::Unknown => "unknown",
        }
    }

    /// Parses a canonical label. Used for canonical files, not raw data.
    pub fn from_canonical(s: &str) -> Option<Self> {
        PerceivedRace::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for PerceivedRace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One police encounter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopRecord {
    pub state: State,
    pub stop_id: String,
    pub date: NaiveDate,
    pub hour: Option<u8>,
    pub county: Option<String>,
    pub officer_id: Option<String>,
    pub perceived_race: PerceivedRace,
    pub searched: bool,
    /// Never present for Texas.
    pub arrested: Option<bool>,
    /// Present only for Arizona.
    pub duration_minutes: Option<f64>,
    /// Normalized linkage key components, in the order of the state's
    /// key definition. `None` marks a component that is missing.
    #[serde(default)]
    pub link_fields: Vec<Option<String>>,
}

impl StopRecord {
    pub fn is_hispanic(&self) -> bool {
        self.perceived_race == PerceivedRace::Hispanic
    }

    pub fn missing_all_link_fields(&self) -> bool {
        self.link_fields.iter().all(Option::is_none)
    }
}
