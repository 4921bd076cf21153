use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::normalize::{is_missing_marker, normalize_link_field, normalize_race};
use super::{FieldSource, StateConfig, StopRecord};
use crate::error::{Error, Result};

/// A raw row that did not become a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based data row number (the header is row 0).
    pub row_number: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOutput {
    pub records: Vec<StopRecord>,
    pub rejections: Vec<Rejection>,
    pub n_rows: usize,
}

impl LoadOutput {
    /// Writes the rejection log as one JSON object per line.
    pub fn write_rejections(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        for r in &self.rejections {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn load_stops(path: &Path, config: &StateConfig) -> Result<LoadOutput> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_stops_from_reader(file, config)
}

/// Parses a delimited table under `config`.
///
/// Every data row yields exactly one record or one rejection. Rows are
/// parsed in parallel; output order is file order.
pub fn load_stops_from_reader(reader: impl Read, config: &StateConfig) -> Result<LoadOutput> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(config.delimiter as u8)
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);

    let header = rdr.headers()?.clone();
    let positions: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let index = |col: &str| -> Result<usize> {
        positions.get(col).copied().ok_or_else(|| Error::Schema { column: col.to_string() })
    };
    for col in config.required_columns() {
        index(col)?;
    }
    let optional = |src: &FieldSource| -> Result<Option<usize>> { src.column().map(&index).transpose() };
    let c = &config.columns;
    let layout = Layout {
        stop_id: index(&c.stop_id)?,
        date: index(&c.date)?,
        race: index(&c.perceived_race)?,
        searched: index(&c.searched)?,
        hour: optional(&c.hour)?,
        county: optional(&c.county)?,
        officer: optional(&c.officer_id)?,
        arrested: optional(&c.arrested)?,
        duration: optional(&c.duration_minutes)?,
        link: config.link_key.iter().map(|k| index(&k.column)).collect::<Result<_>>()?,
    };

    let mut raw_rows = Vec::new();
    for rec in rdr.records() {
        raw_rows.push(rec.map_err(|e| e.to_string()));
    }

    let parsed: Vec<std::result::Result<StopRecord, String>> = raw_rows
        .par_iter()
        .map(|row| match row {
            Ok(r) => parse_row(r, &layout, config),
            Err(e) => Err(format!("malformed row: {e}")),
        })
        .collect();

    let mut out = LoadOutput { n_rows: parsed.len(), ..Default::default() };
    for (i, p) in parsed.into_iter().enumerate() {
        match p {
            Ok(rec) => out.records.push(rec),
            Err(reason) => out.rejections.push(Rejection { row_number: i + 1, reason }),
        }
    }
    Ok(out)
}

struct Layout {
    stop_id: usize,
    date: usize,
    race: usize,
    searched: usize,
    hour: Option<usize>,
    county: Option<usize>,
    officer: Option<usize>,
    arrested: Option<usize>,
    duration: Option<usize>,
    link: Vec<usize>,
}

fn parse_row(row: &csv::StringRecord, layout: &Layout, config: &StateConfig) -> std::result::Result<StopRecord, String> {
    let field = |i: usize| row.get(i).ok_or_else(|| format!("row has {} fields; column {} missing", row.len(), i + 1));
    let optional = |i: Option<usize>| -> Option<&str> {
        i.and_then(|i| row.get(i)).map(str::trim).filter(|s| !is_missing_marker(s))
    };

    let stop_id = field(layout.stop_id)?.trim();
    if stop_id.is_empty() {
        return Err("missing stop_id".into());
    }
    let raw_date = field(layout.date)?.trim();
    let date = NaiveDate::parse_from_str(raw_date, &config.date_format)
        .map_err(|_| format!("unparseable date `{raw_date}`"))?;
    if !config.date_filter.contains(date) {
        return Err(format!("date {date} outside configured range"));
    }
    let raw_searched = field(layout.searched)?;
    let searched = parse_bool(raw_searched).ok_or_else(|| format!("unparseable searched flag `{}`", raw_searched.trim()))?;
    let link_fields = layout
        .link
        .iter()
        .map(|&i| row.get(i).and_then(normalize_link_field))
        .collect();

    Ok(StopRecord {
        state: config.state,
        stop_id: stop_id.to_string(),
        date,
        hour: optional(layout.hour).and_then(parse_hour),
        county: optional(layout.county).map(str::to_string),
        officer_id: optional(layout.officer).map(str::to_string),
        perceived_race: normalize_race(field(layout.race)?, &config.race_labels),
        searched,
        arrested: optional(layout.arrested).and_then(parse_bool),
        duration_minutes: optional(layout.duration)
            .and_then(|s| s.parse::<f64>().ok())
            .filter(|d| d.is_finite() && *d >= 0.0),
        link_fields,
    })
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "t" | "1" | "y" | "yes" => Some(true),
        "false" | "f" | "0" | "n" | "no" => Some(false),
        _ => None,
    }
}

/// Accepts `14`, `14:35` and `14:35:00`.
fn parse_hour(s: &str) -> Option<u8> {
    let head = s.split(':').next()?.trim();
    head.parse::<u8>().ok().filter(|h| *h < 24)
}

/// Counts of rows removed by each validity rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub n_input: usize,
    pub pre2016: usize,
    pub missing_all_link_fields: usize,
    pub n_output: usize,
}

/// Removes Texas records dated before 2016 and records with no linkage
/// field at all.
pub fn apply_validity_filters(records: Vec<StopRecord>) -> (Vec<StopRecord>, FilterReport) {
    let mut report = FilterReport { n_input: records.len(), ..Default::default() };
    let kept: Vec<StopRecord> = records
        .into_iter()
        .filter(|r| {
            if r.state.min_valid_date().is_some_and(|min| r.date < min) {
                report.pre2016 += 1;
                false
            } else if r.missing_all_link_fields() {
                report.missing_all_link_fields += 1;
                false
            } else {
                true
            }
        })
        .collect();
    report.n_output = kept.len();
    (kept, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{PerceivedRace, State};

    fn config(state: &str, extra: &str) -> StateConfig {
        let (arrested, duration) = match state {
            "AZ" => ("\"arrest\"", "\"dur\""),
            "TX" => ("{ absent = true }", "{ absent = true }"),
            _ => ("\"arrest\"", "{ absent = true }"),
        };
        StateConfig::from_toml_str(&format!(
            r#"
state = "{state}"
{extra}
[columns]
stop_id = "id"
date = "date"
perceived_race = "race"
searched = "search"
hour = "time"
county = "county"
officer_id = "officer"
arrested = {arrested}
duration_minutes = {duration}
[race_labels]
W = "white"
H = "hispanic"
[[link_key]]
component = "first_name"
column = "first"
[[link_key]]
component = "last_name"
column = "last"
"#
        ))
        .unwrap()
    }

    const AZ_HEADER: &str = "id,date,time,county,officer,race,search,arrest,dur,first,last\n";

    #[test]
    fn az_row_maps_race() {
        let csv = format!("{AZ_HEADER}a1,2012-03-04,14:05:00,Maricopa,o7,W,FALSE,FALSE,12.5,José,Díaz\n");
        let out = load_stops_from_reader(csv.as_bytes(), &config("AZ", "")).unwrap();
        assert_eq!(out.rejections, vec![]);
        let r = &out.records[0];
        assert_eq!(r.perceived_race, PerceivedRace::White);
        assert_eq!(r.hour, Some(14));
        assert_eq!(r.duration_minutes, Some(12.5));
        assert_eq!(r.arrested, Some(false));
        assert_eq!(r.link_fields, vec![Some("jose".into()), Some("diaz".into())]);
        assert_eq!(r.state, State::Az);
    }

    #[test]
    fn missing_column_names_the_column() {
        let csv = "id,date,time,county,officer,race,search,arrest,first,last\n";
        match load_stops_from_reader(csv.as_bytes(), &config("AZ", "")) {
            Err(Error::Schema { column }) => assert_eq!(column, "dur"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn conservation_with_bad_dates() {
        let mut csv = AZ_HEADER.to_string();
        for i in 0..10 {
            let date = if i == 3 || i == 7 { "03/04/2012".to_string() } else { format!("2012-03-{:02}", i + 1) };
            csv.push_str(&format!("s{i},{date},10,c,o,H,TRUE,FALSE,5,a,b\n"));
        }
        let out = load_stops_from_reader(csv.as_bytes(), &config("AZ", "")).unwrap();
        assert_eq!(out.records.len(), 8);
        assert_eq!(out.rejections.len(), 2);
        assert_eq!(out.rejections[0].row_number, 4);
        assert_eq!(out.rejections[1].row_number, 8);
        assert!(out.rejections[0].reason.contains("unparseable date"));
        assert_eq!(out.n_rows, out.records.len() + out.rejections.len());
    }

    #[test]
    fn tx_date_filter_in_config_rejects() {
        let header = "id,date,time,county,officer,race,search,first,last\n";
        let csv = format!("{header}t1,2015-11-30,10,c,o,H,FALSE,a,b\nt2,2016-01-02,10,c,o,H,FALSE,a,b\n");
        let cfg = StateConfig {
            date_filter: super::super::config::DateRange { start: NaiveDate::from_ymd_opt(2016, 1, 1), end: None },
            ..tx_config()
        };
        let out = load_stops_from_reader(csv.as_bytes(), &cfg).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].stop_id, "t2");
        assert!(out.rejections[0].reason.contains("outside configured range"));
    }

    fn tx_config() -> StateConfig {
        StateConfig::from_toml_str(
            r#"
state = "TX"
[columns]
stop_id = "id"
date = "date"
perceived_race = "race"
searched = "search"
hour = "time"
county = "county"
officer_id = "officer"
arrested = { absent = true }
duration_minutes = { absent = true }
[[link_key]]
component = "first_name"
column = "first"
[[link_key]]
component = "last_name"
column = "last"
"#,
        )
        .unwrap()
    }

    #[test]
    fn missing_optional_values_stay_missing() {
        let csv = format!("{AZ_HEADER}a1,2012-03-04,NA,,NA,Q,1,,NA,x,y\n");
        let r = &load_stops_from_reader(csv.as_bytes(), &config("AZ", "")).unwrap().records[0];
        assert_eq!((r.hour, r.county.as_deref(), r.officer_id.as_deref()), (None, None, None));
        assert_eq!(r.perceived_race, PerceivedRace::Unknown);
        assert_eq!(r.arrested, None);
        assert_eq!(r.duration_minutes, None);
        assert!(r.searched);
    }

    #[test]
    fn semicolon_delimiter() {
        let csv = AZ_HEADER.replace(',', ";") + "a1;2012-03-04;3;c;o;H;0;0;1;x;y\n";
        let out = load_stops_from_reader(csv.as_bytes(), &config("AZ", "delimiter = \";\"")).unwrap();
        assert_eq!(out.records.len(), 1);
    }

    #[test]
    fn load_is_deterministic() {
        let mut csv = AZ_HEADER.to_string();
        for i in 0..500 {
            csv.push_str(&format!("s{i},2012-01-{:02},{},c{},o,H,{},0,1,n{},m\n", i % 28 + 1, i % 24, i % 5, i % 2, i % 17));
        }
        let a = load_stops_from_reader(csv.as_bytes(), &config("AZ", "")).unwrap();
        let b = load_stops_from_reader(csv.as_bytes(), &config("AZ", "")).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records[137].stop_id, "s137");
    }

    fn rec(state: State, date: (i32, u32, u32), links: Vec<Option<&str>>) -> StopRecord {
        StopRecord {
            state,
            stop_id: "x".into(),
            date: NaiveDate::from_ymd_opt(date.0, date.1, date.2).unwrap(),
            hour: None,
            county: None,
            officer_id: None,
            perceived_race: PerceivedRace::White,
            searched: false,
            arrested: None,
            duration_minutes: None,
            link_fields: links.into_iter().map(|s| s.map(String::from)).collect(),
        }
    }

    #[test]
    fn tx_pre2016_removed() {
        let records: Vec<_> = (0..100)
            .map(|i| rec(State::Tx, if i < 40 { (2015, 6, 1) } else { (2016, 6, 1) }, vec![Some("a")]))
            .collect();
        let (kept, report) = apply_validity_filters(records);
        assert_eq!(kept.len(), 60);
        assert_eq!(report.pre2016, 40);
        assert_eq!(report.missing_all_link_fields, 0);
    }

    #[test]
    fn az_has_no_date_rule() {
        let records: Vec<_> = (0..10).map(|_| rec(State::Az, (2011, 1, 1), vec![Some("a")])).collect();
        let (kept, report) = apply_validity_filters(records);
        assert_eq!(kept.len(), 10);
        assert_eq!(report.pre2016, 0);
    }

    #[test]
    fn row_without_any_link_field_removed() {
        let records = vec![
            rec(State::Co, (2012, 1, 1), vec![Some("a"), Some("b")]),
            rec(State::Co, (2012, 1, 1), vec![None, Some("b")]),
            rec(State::Co, (2012, 1, 1), vec![None, None]),
            rec(State::Co, (2012, 1, 1), vec![Some("a"), None]),
        ];
        let (kept, report) = apply_validity_filters(records);
        assert_eq!(kept.len(), 3);
        assert_eq!(report.missing_all_link_fields, 1);
        assert_eq!(report.n_output, 3);
    }
}
