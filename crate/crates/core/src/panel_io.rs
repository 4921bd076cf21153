//! Canonical on-disk panel format shared by `link` and `simulate` output.
//!
//! Comma-separated with a header row, one stop per row, columns in this
//! order:
//!
//! `driver_id, state, stop_id, date, hour, county, officer_id,
//! perceived_race, searched, arrested, duration_minutes, linkable`
//!
//! Missing optional values are empty fields. Booleans are `true`/`false`,
//! dates ISO 8601. Rows are written grouped by driver in panel order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{PerceivedRace, State, StopRecord};
use crate::linkage::{DriverId, DriverPanel};

pub const PANEL_COLUMNS: [&str; 12] = [
    "driver_id",
    "state",
    "stop_id",
    "date",
    "hour",
    "county",
    "officer_id",
    "perceived_race",
    "searched",
    "arrested",
    "duration_minutes",
    "linkable",
];

#[derive(Debug, Serialize, Deserialize)]
struct PanelRow {
    driver_id: DriverId,
    state: State,
    stop_id: String,
    date: NaiveDate,
    hour: Option<u8>,
    county: Option<String>,
    officer_id: Option<String>,
    perceived_race: PerceivedRace,
    searched: bool,
    arrested: Option<bool>,
    duration_minutes: Option<f64>,
    linkable: bool,
}

pub fn write_panels<W: Write>(writer: W, panels: &[DriverPanel]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(PANEL_COLUMNS)?;
    for p in panels {
        for s in &p.stops {
            w.serialize(PanelRow {
                driver_id: p.driver_id,
                state: s.state,
                stop_id: s.stop_id.clone(),
                date: s.date,
                hour: s.hour,
                county: s.county.clone(),
                officer_id: s.officer_id.clone(),
                perceived_race: s.perceived_race,
                searched: s.searched,
                arrested: s.arrested,
                duration_minutes: s.duration_minutes,
                linkable: p.linkable,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io("<panel writer>", e))?;
    Ok(())
}

pub fn write_panels_path(path: impl AsRef<Path>, panels: &[DriverPanel]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_panels(BufWriter::new(f), panels)
}

/// Reads panels, grouping rows by `driver_id`. Output is sorted by driver
/// id with stops in canonical order.
pub fn read_panels<R: Read>(reader: R) -> Result<Vec<DriverPanel>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != PANEL_COLUMNS {
        let missing = PANEL_COLUMNS.iter().find(|c| !header.iter().any(|h| h == *c));
        return Err(match missing {
            Some(c) => Error::Schema { column: c.to_string() },
            None => Error::Format { line: 1, message: format!("expected columns {}", PANEL_COLUMNS.join(",")) },
        });
    }
    let mut groups: BTreeMap<DriverId, (State, bool, Vec<StopRecord>)> = BTreeMap::new();
    for (i, row) in r.deserialize::<PanelRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Format { line, message: e.to_string() })?;
        let entry = groups.entry(row.driver_id).or_insert_with(|| (row.state, row.linkable, Vec::new()));
        if entry.0 != row.state || entry.1 != row.linkable {
            return Err(Error::Format {
                line,
                message: format!("driver {} has inconsistent state or linkable flag", row.driver_id),
            });
        }
        entry.2.push(StopRecord {
            state: row.state,
            stop_id: row.stop_id,
            date: row.date,
            hour: row.hour,
            county: row.county,
            officer_id: row.officer_id,
            perceived_race: row.perceived_race,
            searched: row.searched,
            arrested: row.arrested,
            duration_minutes: row.duration_minutes,
            link_fields: vec![],
        });
    }
    Ok(groups.into_iter().map(|(id, (state, linkable, stops))| DriverPanel::new(id, state, linkable, stops)).collect())
}

pub fn read_panels_path(path: impl AsRef<Path>) -> Result<Vec<DriverPanel>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_panels(BufReader::new(f))
}

/// One JSON object per line.
pub fn write_records_jsonl<W: Write>(mut writer: W, records: &[StopRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n").map_err(|e| Error::io("<records writer>", e))?;
    }
    Ok(())
}

pub fn read_records_jsonl<R: Read>(reader: R) -> Result<Vec<StopRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io("<records reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_panel, SimConfig};

    #[test]
    fn round_trip_simulated() {
        let (panels, _) = generate_panel(&SimConfig::taste_preset(200, 3)).unwrap();
        let mut buf = Vec::new();
        write_panels(&mut buf, &panels).unwrap();
        let back = read_panels(buf.as_slice()).unwrap();
        assert_eq!(back, panels);
        let mut again = Vec::new();
        write_panels(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn header_and_missing_values() {
        let text = "driver_id,state,stop_id,date,hour,county,officer_id,perceived_race,searched,arrested,duration_minutes,linkable\n\
                    0000000000000000000000000000000a,TX,s1,2016-02-01,,,,hispanic,true,,,false\n";
        let p = read_panels(text.as_bytes()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].driver_id, DriverId(10));
        let s = &p[0].stops[0];
        assert_eq!((s.hour, s.arrested, s.county.as_deref()), (None, None, None));
        assert!(!p[0].linkable);
    }

    #[test]
    fn missing_column_is_schema_error() {
        let text = "driver_id,state,stop_id\n";
        assert!(matches!(read_panels(text.as_bytes()), Err(Error::Schema { .. })));
    }

    #[test]
    fn bad_value_reports_line() {
        let text = "driver_id,state,stop_id,date,hour,county,officer_id,perceived_race,searched,arrested,duration_minutes,linkable\n\
                    01,AZ,s1,2016-02-01,,,,white,maybe,,,true\n";
        assert!(matches!(read_panels(text.as_bytes()), Err(Error::Format { line: 2, .. })));
    }

    #[test]
    fn records_jsonl_round_trip() {
        let (panels, _) = generate_panel(&SimConfig::taste_preset(20, 1)).unwrap();
        let recs: Vec<StopRecord> = panels.into_iter().flat_map(|p| p.stops).collect();
        let mut buf = Vec::new();
        write_records_jsonl(&mut buf, &recs).unwrap();
        assert_eq!(read_records_jsonl(buf.as_slice()).unwrap(), recs);
    }
}
