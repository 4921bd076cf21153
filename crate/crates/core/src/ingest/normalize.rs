use std::collections::BTreeMap;

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use super::PerceivedRace;

/// Maps a raw race label onto the canonical categories.
///
/// Lookup is on the trimmed, lower-cased label: first the state table, then
/// the canonical names and the upstream long-form labels. Anything else is
/// `Unknown`. Canonical names always map to themselves, so normalizing an
/// already-normalized label is a no-op.
pub fn normalize_race(raw: &str, table: &BTreeMap<String, PerceivedRace>) -> PerceivedRace {
    let key = raw.trim().to_lowercase();
    if let Some(r) = PerceivedRace::from_canonical(&key) {
        return r;
    }
    if let Some(r) = table.get(&key) {
        return *r;
    }
    match key.as_str() {
        "asian/pacific islander" | "asian" | "pacific islander" => PerceivedRace::AsianPacific,
        _ => PerceivedRace::Unknown,
    }
}

/// Canonical form of a linkage key component: case folded, diacritics
/// stripped, internal whitespace collapsed to single spaces.
///
/// Returns `None` when nothing is left.
pub fn normalize_link_field(raw: &str) -> Option<String> {
    if is_missing_marker(raw) {
        return None;
    }
    let folded = raw.to_lowercase();
    let stripped: String = folded.nfd().filter(|c| !is_combining_mark(*c)).nfc().collect();
    let collapsed = stripped.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed.is_empty() {
        None
    } else {
        Some(collapsed)
    }
}

/// Upstream missing-value markers. Case-sensitive so that a surname such as
/// "Na" survives.
pub(crate) fn is_missing_marker(raw: &str) -> bool {
    matches!(raw.trim(), "" | "NA" | "N/A" | "NULL" | "NaN" | "None")
}
