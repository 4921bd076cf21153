#![allow(dead_code)]

use chrono::{Days, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use perceptfe::estimators::Control;
use perceptfe::ingest::{PerceivedRace, State, StopRecord};
use perceptfe::linkage::{DriverId, DriverPanel};

fn maybe<T>(rng: &mut ChaCha8Rng, p_missing: f64, v: T) -> Option<T> {
    (rng.random::<f64>() >= p_missing).then_some(v)
}

/// Small random Arizona panels with a few missing values in every optional
/// column.
pub fn random_panels(rng: &mut ChaCha8Rng, max_drivers: usize, max_stops: usize) -> Vec<DriverPanel> {
    let n_drivers = rng.random_range(5..=max_drivers);
    let start = NaiveDate::from_ymd_opt(2011, 1, 1).unwrap();
    (0..n_drivers)
        .map(|i| {
            let n = rng.random_range(1..=max_stops);
            let p_hisp = rng.random::<f64>();
            let stops = (0..n)
                .map(|j| {
                    let hour = rng.random_range(0..24u8);
                    let county = format!("c{}", rng.random_range(0..3));
                    let officer = format!("o{}", rng.random_range(0..6));
                    let minutes = 5.0 + 30.0 * rng.random::<f64>();
                    StopRecord {
                        state: State::Az,
                        stop_id: format!("{i}-{j}"),
                        date: start + Days::new(rng.random_range(0..1800)),
                        hour: maybe(rng, 0.05, hour),
                        county: maybe(rng, 0.05, county),
                        officer_id: maybe(rng, 0.05, officer),
                        perceived_race: if rng.random::<f64>() < p_hisp {
                            PerceivedRace::Hispanic
                        } else {
                            PerceivedRace::White
                        },
                        searched: rng.random::<f64>() < 0.3,
                        arrested: Some(rng.random::<f64>() < 0.1),
                        duration_minutes: maybe(rng, 0.05, minutes),
                        link_fields: vec![],
                    }
                })
                .collect();
            DriverPanel::new(DriverId::from_label(&format!("rand-{i}")), State::Az, true, stops)
        })
        .collect()
}

/// Random panels with stops drawn from all six perceived-race categories.
pub fn random_race_panels(rng: &mut ChaCha8Rng, max_drivers: usize) -> Vec<DriverPanel> {
    let n = rng.random_range(1..=max_drivers);
    let start = NaiveDate::from_ymd_opt(2016, 1, 1).unwrap();
    (0..n)
        .map(|i| {
            let state = State::ALL[rng.random_range(0..3)];
            let k = rng.random_range(1..=6);
            let stops = (0..k)
                .map(|j| StopRecord {
                    state,
                    stop_id: format!("{i}-{j}"),
                    date: start + Days::new(rng.random_range(0..500)),
                    hour: None,
                    county: None,
                    officer_id: None,
                    perceived_race: if rng.random::<f64>() < 0.7 {
                        [PerceivedRace::White, PerceivedRace::Hispanic][rng.random_range(0..2)]
                    } else {
                        PerceivedRace::ALL[rng.random_range(0..6)]
                    },
                    searched: rng.random::<f64>() < 0.2,
                    arrested: None,
                    duration_minutes: None,
                    link_fields: vec![],
                })
                .collect();
            DriverPanel::new(DriverId::from_label(&format!("race-{i}")), state, true, stops)
        })
        .collect()
}

/// Coefficient on the treatment from least squares of the outcome on the
/// treatment, a full set of driver dummies, full dummy sets for every
/// categorical control and the raw duration, built directly from stops.
/// Returns `None` when the treatment is not identified.
pub fn dummy_variable_delta(panels: &[DriverPanel], controls: &[Control]) -> Option<f64> {
    dummy_variable_fit(panels, controls).map(|f| f.delta)
}

pub struct DummyFit {
    pub delta: f64,
    pub n_rows: usize,
    pub rank: usize,
}

pub fn dummy_variable_fit(panels: &[DriverPanel], controls: &[Control]) -> Option<DummyFit> {
    use chrono::Datelike;
    let lt = controls.contains(&Control::LocationTime);
    let off = controls.contains(&Control::Officer);
    let dur = controls.contains(&Control::Duration);
    let mut rows: Vec<(String, &StopRecord)> = Vec::new();
    for p in panels {
        for s in &p.stops {
            if lt && (s.county.is_none() || s.hour.is_none()) {
                continue;
            }
            if off && s.officer_id.is_none() {
                continue;
            }
            if dur && s.duration_minutes.is_none() {
                continue;
            }
            rows.push((p.driver_id.to_string(), s));
        }
    }
    let n = rows.len();
    let mut cols: Vec<Vec<f64>> = vec![rows.iter().map(|(_, s)| f64::from(u8::from(s.is_hispanic()))).collect()];
    let mut dummies = |key: &dyn Fn(&(String, &StopRecord)) -> String| {
        let mut levels: Vec<String> = rows.iter().map(key).collect();
        levels.sort();
        levels.dedup();
        for l in levels {
            cols.push(rows.iter().map(|r| f64::from(u8::from(key(r) == l))).collect());
        }
    };
    dummies(&|r| r.0.clone());
    if lt {
        dummies(&|r| r.1.county.clone().unwrap());
        dummies(&|r| r.1.date.year().to_string());
        dummies(&|r| r.1.date.quarter().to_string());
        dummies(&|r| r.1.date.weekday().to_string());
        dummies(&|r| (r.1.hour.unwrap() / 3).to_string());
    }
    if off {
        dummies(&|r| r.1.officer_id.clone().unwrap());
    }
    if dur {
        cols.push(rows.iter().map(|r| r.1.duration_minutes.unwrap()).collect());
    }
    let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    let y = DVector::from_iterator(n, rows.iter().map(|r| f64::from(u8::from(r.1.searched))));

    // keep a maximal independent set of the other columns; the treatment is
    // identified iff it is not in their span
    let (basis, q) = gram_schmidt(&x.columns(1, x.ncols() - 1).into_owned());
    let mut t = x.column(0).into_owned();
    let t_norm = t.norm();
    for _ in 0..2 {
        for u in &q {
            let d = u.dot(&t);
            t.axpy(-d, u, 1.0);
        }
    }
    if t.norm() <= 1e-9 * t_norm {
        return None;
    }
    let mut keep = vec![0];
    keep.extend(basis.iter().map(|j| j + 1));
    let xs = x.select_columns(&keep);
    let qr = xs.qr();
    let b = qr.r().solve_upper_triangular(&(qr.q().transpose() * y)).expect("full rank");
    Some(DummyFit { delta: b[0], n_rows: n, rank: keep.len() })
}

/// Indices of a maximal linearly independent subset of the columns, chosen
/// left to right by Gram-Schmidt with reorthogonalization, and an
/// orthonormal basis of their span.
pub fn gram_schmidt(x: &DMatrix<f64>) -> (Vec<usize>, Vec<DVector<f64>>) {
    let mut q: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for j in 0..x.ncols() {
        let c = x.column(j).into_owned();
        let norm = c.norm();
        let mut v = c;
        for _ in 0..2 {
            for u in &q {
                let d = u.dot(&v);
                v.axpy(-d, u, 1.0);
            }
        }
        if norm > 0.0 && v.norm() > 1e-9 * norm {
            kept.push(j);
            q.push(v.normalize());
        }
    }
    (kept, q)
}
