mod common;

use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use perceptfe::cohort::{
    build_cohorts, descriptive_stats, filter_inconsistent, filter_multiply_stopped, filter_white_hispanic, CohortRules,
};
use perceptfe::ingest::{load_stops_from_reader, PerceivedRace, StateConfig};
use perceptfe::linkage::link_drivers;

fn az_config() -> StateConfig {
    StateConfig::from_path(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/az.toml")).unwrap()
}

const AZ_HEADER: &str = "raw_row_number,date,time,county_name,officer_id,driver_race,search_conducted,arrest_made,stop_duration,driver_first_name,driver_last_name,vehicle_style,vehicle_year";

prop_compose! {
    fn az_row(i: usize)(
        date in prop_oneof![Just("2013-05-06"), Just("2014-13-40"), Just(""), Just("2012-01-31")],
        race in prop_oneof![Just("W"), Just("H"), Just("B"), Just("Z"), Just("")],
        searched in prop_oneof![Just("TRUE"), Just("FALSE"), Just("maybe")],
        first in prop_oneof![Just("Ana"), Just(" ana "), Just("José"), Just("")],
        last in prop_oneof![Just("Ruiz"), Just("RUIZ"), Just("")],
    ) -> String {
        format!("r{i},{date},09:30,Pima,A1,{race},{searched},FALSE,10,{first},{last},Sedan,2001")
    }
}

fn az_table() -> impl Strategy<Value = String> {
    (1usize..40).prop_flat_map(|n| {
        (0..n).map(az_row).collect::<Vec<_>>().prop_map(|rows| format!("{AZ_HEADER}\n{}\n", rows.join("\n")))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn every_input_row_is_a_record_or_a_rejection(text in az_table()) {
        let cfg = az_config();
        let out = load_stops_from_reader(text.as_bytes(), &cfg).unwrap();
        prop_assert_eq!(out.n_rows, out.records.len() + out.rejections.len());
        prop_assert_eq!(out.n_rows, text.lines().count() - 1);
        let again = load_stops_from_reader(text.as_bytes(), &cfg).unwrap();
        prop_assert_eq!(out.records, again.records);
    }

    #[test]
    fn linkage_conserves_stops(text in az_table()) {
        let cfg = az_config();
        let records = load_stops_from_reader(text.as_bytes(), &cfg).unwrap().records;
        let n = records.len();
        let (panels, _) = link_drivers(records, &cfg).unwrap();
        prop_assert_eq!(panels.iter().map(|p| p.n_stops()).sum::<usize>(), n);
    }

    #[test]
    fn cohort_rates_and_filters(seed in any::<u64>(), exact_set in any::<bool>(), unknown_excludes in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let panels = common::random_race_panels(&mut rng, 60);
        let rules = CohortRules { exact_set, unknown_excludes, ..CohortRules::default() };
        let levels = build_cohorts(panels.clone(), rules);
        let stats = descriptive_stats(&levels);

        // search rates come from the analysis sample alone
        let (mut hs, mut hn, mut ws, mut wn) = (0, 0, 0, 0);
        for s in levels.analysis.iter().flat_map(|p| &p.stops) {
            match s.perceived_race {
                PerceivedRace::Hispanic => { hn += 1; hs += usize::from(s.searched); }
                PerceivedRace::White => { wn += 1; ws += usize::from(s.searched); }
                _ => {}
            }
        }
        let r = &stats.search_overall;
        prop_assert_eq!((r.n_comparison_searched, r.n_comparison_stops, r.n_reference_searched, r.n_reference_stops), (hs, hn, ws, wn));
        for rate in [r.comparison_rate(), r.reference_rate()].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&rate));
        }
        for level in &stats.levels {
            for pct in [level.overall.pct_drivers_of_parent, level.overall.pct_stops_of_parent].into_iter().flatten() {
                prop_assert!((0.0..=100.0).contains(&pct));
            }
        }

        // filters are idempotent and the pair filter subsumes the inconsistency filter
        let multi = filter_multiply_stopped(&panels);
        prop_assert_eq!(&filter_multiply_stopped(&multi), &multi);
        let inconsistent = filter_inconsistent(&multi);
        prop_assert_eq!(&filter_inconsistent(&inconsistent), &inconsistent);
        let pair = filter_white_hispanic(&multi, &rules);
        prop_assert_eq!(&filter_white_hispanic(&inconsistent, &rules), &pair);
        prop_assert_eq!(&filter_white_hispanic(&pair, &rules), &pair);
    }
}
