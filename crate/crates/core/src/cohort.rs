//! Nested analysis subsets and their descriptive statistics.
//!
//! Levels, each a subset of the one before:
//! 1. all drivers,
//! 2. drivers stopped at least twice,
//! 3. of those, drivers whose perceived race differs across stops,
//! 4. of those, drivers perceived as exactly the analysis pair
//!    (white and Hispanic by default).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ingest::{PerceivedRace, State};
use crate::linkage::DriverPanel;

/// Toggles for the final white/Hispanic filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortRules {
    /// Reference category (treatment = 0) and comparison category (= 1).
    pub pair: (PerceivedRace, PerceivedRace),
    /// Require the known perceived races to be exactly the pair. When false,
    /// any driver perceived as both members of the pair qualifies and only
    /// their stops in the pair are kept.
    pub exact_set: bool,
    /// Exclude a driver with any `unknown` stop. When false, unknown stops
    /// are dropped and the rest of the panel is judged on its own.
    pub unknown_excludes: bool,
}

impl Default for CohortRules {
    fn default() -> Self {
        CohortRules {
            pair: (PerceivedRace::White, PerceivedRace::Hispanic),
            exact_set: true,
            unknown_excludes: true,
        }
    }
}

pub fn filter_multiply_stopped(panels: &[DriverPanel]) -> Vec<DriverPanel> {
    panels.iter().filter(|p| p.n_stops() >= 2).cloned().collect()
}

/// Keeps panels with at least two distinct non-unknown perceived races.
pub fn filter_inconsistent(panels: &[DriverPanel]) -> Vec<DriverPanel> {
    panels
        .iter()
        .filter(|p| p.races().into_iter().filter(|r| *r != PerceivedRace::Unknown).count() >= 2)
        .cloned()
        .collect()
}

pub fn filter_white_hispanic(panels: &[DriverPanel], rules: &CohortRules) -> Vec<DriverPanel> {
    let (a, b) = rules.pair;
    let pair: BTreeSet<PerceivedRace> = [a, b].into();
    panels
        .iter()
        .filter_map(|p| {
            let races = p.races();
            if rules.unknown_excludes && races.contains(&PerceivedRace::Unknown) {
                return None;
            }
            let known: BTreeSet<_> = races.into_iter().filter(|r| *r != PerceivedRace::Unknown).collect();
            let qualifies = if rules.exact_set { known == pair } else { known.is_superset(&pair) };
            if !qualifies {
                return None;
            }
            let mut out = p.clone();
            out.stops.retain(|s| pair.contains(&s.perceived_race));
            Some(out)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortLevels {
    pub all: Vec<DriverPanel>,
    pub multiply_stopped: Vec<DriverPanel>,
    pub inconsistent: Vec<DriverPanel>,
    pub analysis: Vec<DriverPanel>,
    pub rules: CohortRules,
}

pub fn build_cohorts(panels: Vec<DriverPanel>, rules: CohortRules) -> CohortLevels {
    let multiply_stopped = filter_multiply_stopped(&panels);
    let inconsistent = filter_inconsistent(&multiply_stopped);
    let analysis = filter_white_hispanic(&inconsistent, &rules);
    CohortLevels { all: panels, multiply_stopped, inconsistent, analysis, rules }
}

impl CohortLevels {
    pub fn levels(&self) -> [&[DriverPanel]; 4] {
        [&self.all, &self.multiply_stopped, &self.inconsistent, &self.analysis]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub n_drivers: usize,
    pub n_stops: usize,
    /// Percent of the parent level's drivers; `None` at the top level or
    /// when the parent is empty.
    pub pct_drivers_of_parent: Option<f64>,
    pub pct_stops_of_parent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub label: String,
    pub by_state: BTreeMap<State, GroupCounts>,
    pub overall: GroupCounts,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchRates {
    pub n_comparison_stops: usize,
    pub n_comparison_searched: usize,
    pub n_reference_stops: usize,
    pub n_reference_searched: usize,
}

impl SearchRates {
    pub fn comparison_rate(&self) -> Option<f64> {
        ratio(self.n_comparison_searched, self.n_comparison_stops)
    }

    pub fn reference_rate(&self) -> Option<f64> {
        ratio(self.n_reference_searched, self.n_reference_stops)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub states: Vec<State>,
    pub pair: (PerceivedRace, PerceivedRace),
    pub levels: Vec<LevelStats>,
    pub search_by_state: BTreeMap<State, SearchRates>,
    pub search_overall: SearchRates,
}

pub fn descriptive_stats(levels: &CohortLevels) -> CohortStats {
    let states: Vec<State> = levels.all.iter().map(|p| p.state).collect::<BTreeSet<_>>().into_iter().collect();
    let (reference, comparison) = levels.rules.pair;
    let labels = [
        "Full dataset".to_string(),
        "Multiply-stopped drivers".to_string(),
        "Multiply-stopped drivers with inconsistently perceived race".to_string(),
        format!("Drivers perceived as both {reference} and {comparison}"),
    ];

    let count = |panels: &[DriverPanel], state: Option<State>| -> (usize, usize) {
        panels
            .iter()
            .filter(|p| state.is_none_or(|s| p.state == s))
            .fold((0, 0), |(d, s), p| (d + 1, s + p.n_stops()))
    };

    let mut out_levels = Vec::new();
    let mut parent: Option<&[DriverPanel]> = None;
    for (label, panels) in labels.into_iter().zip(levels.levels()) {
        let group = |state: Option<State>| {
            let (n_drivers, n_stops) = count(panels, state);
            let (pct_drivers_of_parent, pct_stops_of_parent) = match parent {
                None => (None, None),
                Some(par) => {
                    let (pd, ps) = count(par, state);
                    (ratio(n_drivers, pd).map(|r| 100.0 * r), ratio(n_stops, ps).map(|r| 100.0 * r))
                }
            };
            GroupCounts { n_drivers, n_stops, pct_drivers_of_parent, pct_stops_of_parent }
        };
        out_levels.push(LevelStats {
            label,
            by_state: states.iter().map(|&s| (s, group(Some(s)))).collect(),
            overall: group(None),
        });
        parent = Some(panels);
    }

    let rates = |state: Option<State>| {
        let mut r = SearchRates::default();
        for stop in levels
            .analysis
            .iter()
            .filter(|p| state.is_none_or(|s| p.state == s))
            .flat_map(|p| &p.stops)
        {
            if stop.perceived_race == comparison {
                r.n_comparison_stops += 1;
                r.n_comparison_searched += usize::from(stop.searched);
            } else if stop.perceived_race == reference {
                r.n_reference_stops += 1;
                r.n_reference_searched += usize::from(stop.searched);
            }
        }
        r
    };

    CohortStats {
        search_by_state: states.iter().map(|&s| (s, rates(Some(s)))).collect(),
        search_overall: rates(None),
        states,
        pair: levels.rules.pair,
        levels: out_levels,
    }
}

const PARENT_LABELS: [&str; 4] = ["", "all", "all multiply-stopped", "all inconsistently-perceived"];

impl CohortStats {
    /// Plain-text table with one column per state plus an overall column.
    pub fn render_table(&self) -> String {
        let mut header = vec![String::new()];
        header.extend(self.states.iter().map(|s| s.name().to_string()));
        header.push("Overall".into());
        let mut rows: Vec<Vec<String>> = vec![header];
        let ncol = self.states.len() + 2;
        let section = |rows: &mut Vec<Vec<String>>, title: &str| {
            let mut r = vec![title.to_string()];
            r.resize(ncol, String::new());
            rows.push(r);
        };
        let line = |label: String, f: &dyn Fn(&GroupCounts) -> String, lvl: &LevelStats| {
            let mut r = vec![format!("  {label}")];
            r.extend(self.states.iter().map(|s| f(&lvl.by_state[s])));
            r.push(f(&lvl.overall));
            r
        };

        for (k, lvl) in self.levels.iter().enumerate() {
            section(&mut rows, &lvl.label);
            rows.push(line("Drivers".into(), &|g| thousands(g.n_drivers), lvl));
            if k > 0 {
                let parent = PARENT_LABELS[k];
                rows.push(line(format!("% of {parent} drivers"), &|g| pct(g.pct_drivers_of_parent), lvl));
            }
            rows.push(line("Stops".into(), &|g| thousands(g.n_stops), lvl));
            if k > 0 {
                let parent = PARENT_LABELS[k];
                let noun = if k == 1 { "stops" } else { "driver stops" };
                rows.push(line(format!("% of {parent} {noun}"), &|g| pct(g.pct_stops_of_parent), lvl));
            }
        }
        let (reference, comparison) = self.pair;
        for (label, f) in [
            (format!("Search rate when perceived as {comparison}"), SearchRates::comparison_rate as fn(&SearchRates) -> Option<f64>),
            (format!("Search rate when perceived as {reference}"), SearchRates::reference_rate),
        ] {
            let mut r = vec![format!("  {label}")];
            r.extend(self.states.iter().map(|s| pct(f(&self.search_by_state[s]).map(|x| 100.0 * x))));
            r.push(pct(f(&self.search_overall).map(|x| 100.0 * x)));
            rows.push(r);
        }

        let widths: Vec<usize> =
            (0..ncol).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &rows {
            let mut s = format!("{:<w$}", r[0], w = widths[0]);
            for c in 1..ncol {
                write!(s, "  {:>w$}", r[c], w = widths[c]).unwrap();
            }
            out.push_str(s.trim_end());
            out.push('\n');
        }
        out
    }
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.1}%"))
}
