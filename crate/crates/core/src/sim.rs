//! Synthetic stop panels with known differential treatment.
//!
//! Each stop has an appearance signal and an officer. The officer perceives
//! the driver as Hispanic with probability
//! `r = logistic(a0 + a1*appearance + a2*officer_hispanic)`, then compares a
//! risk estimate `p = logistic(b0 + b1*z + b2*hispanic)` against a threshold
//! `t = c0 + c1*hispanic + c2*officer_hispanic`, where `z` is a fixed driver
//! trait. The scenario decides which of `b2`, `c1`, `c2` are active.

use std::fmt;
use std::str::FromStr;

use chrono::{Days, NaiveDate};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{PerceivedRace, State, StopRecord};
use crate::linkage::{DriverId, DriverPanel, MAX_STOPS_PER_DRIVER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Risk depends on perceived race (`b2` active).
    StatisticalDiscrimination,
    /// Threshold depends on perceived race (`c1` active).
    TasteDiscrimination,
    /// Officer race shifts perception and the threshold (`c2` active, `c1`
    /// kept so a true effect can coexist with the confound).
    OfficerConfound,
    /// Neither risk nor threshold depends on perceived race.
    Null,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::StatisticalDiscrimination => "statistical_discrimination",
            Scenario::TasteDiscrimination => "taste_discrimination",
            Scenario::OfficerConfound => "officer_confound",
            Scenario::Null => "null",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "statistical" | "statistical_discrimination" => Ok(Scenario::StatisticalDiscrimination),
            "taste" | "taste_discrimination" => Ok(Scenario::TasteDiscrimination),
            "officer_confound" => Ok(Scenario::OfficerConfound),
            "null" => Ok(Scenario::Null),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

/// Per-stop appearance = driver mean + stop noise. The driver mean has
/// correlation `trait_corr` with the trait `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppearanceModel {
    pub mean: f64,
    pub between_sd: f64,
    pub within_sd: f64,
    #[serde(default)]
    pub trait_corr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfficerModel {
    pub n_officers: usize,
    pub hispanic_share: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptionParams {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskParams {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdParams {
    pub c0: f64,
    pub c1: f64,
    #[serde(default)]
    pub c2: f64,
}

/// Arrest probability is `base`, plus `given_search` when searched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrestModel {
    pub base: f64,
    pub given_search: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_drivers: usize,
    pub seed: u64,
    pub scenario: Scenario,
    #[serde(default = "default_state")]
    pub state: State,
    /// Relative weights on 1, 2, ... stops per driver.
    pub stops_weights: Vec<f64>,
    pub trait_sd: f64,
    pub appearance: AppearanceModel,
    pub officers: OfficerModel,
    pub n_counties: usize,
    pub perception: PerceptionParams,
    pub risk: RiskParams,
    pub threshold: ThresholdParams,
    /// Scale `s` of the stochastic rule `P(search) = logistic((p - t)/s)`.
    /// Absent means the deterministic rule `p > t`.
    pub search_scale: Option<f64>,
    pub arrest: ArrestModel,
}

fn default_state() -> State {
    State::Az
}

/// Parameters after the scenario mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveParams {
    pub perception: PerceptionParams,
    pub risk: RiskParams,
    pub threshold: ThresholdParams,
}

impl SimConfig {
    /// Search rate near 1.5%, threshold lowered for Hispanic-perceived
    /// stops by enough to raise the search probability by about 0.4 points.
    pub fn taste_preset(n_drivers: usize, seed: u64) -> Self {
        SimConfig {
            n_drivers,
            seed,
            scenario: Scenario::TasteDiscrimination,
            state: State::Az,
            stops_weights: vec![0.0, 0.45, 0.3, 0.15, 0.1],
            trait_sd: 1.0,
            appearance: AppearanceModel { mean: 0.0, between_sd: 1.0, within_sd: 1.0, trait_corr: 0.0 },
            officers: OfficerModel { n_officers: 400, hispanic_share: 0.3 },
            n_counties: 15,
            perception: PerceptionParams { a0: -0.5, a1: 1.0, a2: 0.5 },
            risk: RiskParams { b0: -2.3, b1: 0.5, b2: 0.0 },
            threshold: ThresholdParams { c0: 0.335, c1: -0.0127, c2: 0.0 },
            search_scale: Some(0.05),
            arrest: ArrestModel { base: 0.02, given_search: 0.3 },
        }
    }

    /// The taste preset with every race-dependent term switched off.
    pub fn null_preset(n_drivers: usize, seed: u64) -> Self {
        SimConfig { scenario: Scenario::Null, ..Self::taste_preset(n_drivers, seed) }
    }

    /// Hispanic officers perceive more drivers as Hispanic and search less;
    /// drivers whose appearance reads as Hispanic also carry higher risk.
    pub fn officer_confound_preset(n_drivers: usize, seed: u64) -> Self {
        let base = Self::taste_preset(n_drivers, seed);
        SimConfig {
            scenario: Scenario::OfficerConfound,
            officers: OfficerModel { n_officers: 60, hispanic_share: 0.4 },
            appearance: AppearanceModel { trait_corr: 0.6, ..base.appearance },
            perception: PerceptionParams { a2: 1.5, ..base.perception },
            risk: RiskParams { b0: -1.5, ..base.risk },
            threshold: ThresholdParams { c0: 0.35, c1: 0.0, c2: 0.08 },
            search_scale: Some(0.1),
            ..base
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: SimConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn effective(&self) -> EffectiveParams {
        let (mut risk, mut threshold) = (self.risk, self.threshold);
        match self.scenario {
            Scenario::StatisticalDiscrimination => {
                threshold.c1 = 0.0;
                threshold.c2 = 0.0;
            }
            Scenario::TasteDiscrimination => {
                risk.b2 = 0.0;
                threshold.c2 = 0.0;
            }
            Scenario::OfficerConfound => risk.b2 = 0.0,
            Scenario::Null => {
                risk.b2 = 0.0;
                threshold.c1 = 0.0;
                threshold.c2 = 0.0;
            }
        }
        EffectiveParams { perception: self.perception, risk, threshold }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_drivers == 0 {
            return bad("n_drivers must be positive".into());
        }
        let w = &self.stops_weights;
        if w.is_empty() || w.len() > MAX_STOPS_PER_DRIVER {
            return bad(format!("stops_weights must have 1 to {MAX_STOPS_PER_DRIVER} entries"));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return bad("stops_weights must be non-negative with a positive sum".into());
        }
        let a = &self.appearance;
        for (name, v) in [("trait_sd", self.trait_sd), ("between_sd", a.between_sd), ("within_sd", a.within_sd)] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be a non-negative number"));
            }
        }
        if !(-1.0..=1.0).contains(&a.trait_corr) {
            return bad("trait_corr must lie in [-1, 1]".into());
        }
        if self.officers.n_officers == 0 || self.n_counties == 0 {
            return bad("n_officers and n_counties must be positive".into());
        }
        check_probability("officers.hispanic_share", self.officers.hispanic_share)?;
        let t = self.effective().threshold;
        for hisp in [false, true] {
            for off in [false, true] {
                check_probability("threshold t(X, r)", threshold(hisp, off, &t))?;
            }
        }
        if let Some(s) = self.search_scale {
            if !(s.is_finite() && s > 0.0) {
                return bad("search_scale must be positive".into());
            }
        }
        check_probability("arrest.base", self.arrest.base)?;
        check_probability("arrest.base + arrest.given_search", self.arrest.base + self.arrest.given_search)?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_probability(what: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} = {v} is outside [0, 1]")))
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `r(X)`: probability that the stop is recorded as Hispanic.
pub fn perception_probability(appearance: f64, officer_hispanic: bool, p: &PerceptionParams) -> f64 {
    logistic(p.a0 + p.a1 * appearance + p.a2 * f64::from(u8::from(officer_hispanic)))
}

/// Hispanic iff `u < r`, with `u` a uniform draw on `[0, 1)`.
pub fn perceive_race(r: f64, u: f64) -> Result<PerceivedRace> {
    check_probability("r(X)", r)?;
    Ok(if u < r { PerceivedRace::Hispanic } else { PerceivedRace::White })
}

pub fn risk(z: f64, hispanic: bool, p: &RiskParams) -> f64 {
    logistic(p.b0 + p.b1 * z + p.b2 * f64::from(u8::from(hispanic)))
}

pub fn threshold(hispanic: bool, officer_hispanic: bool, t: &ThresholdParams) -> f64 {
    t.c0 + t.c1 * f64::from(u8::from(hispanic)) + t.c2 * f64::from(u8::from(officer_hispanic))
}

/// Probability of a search given risk `p` and threshold `t`.
pub fn search_probability(p: f64, t: f64, scale: Option<f64>) -> f64 {
    match scale {
        None => f64::from(u8::from(p > t)),
        Some(s) => logistic((p - t) / s),
    }
}

/// Deterministic rule `p > t` when `scale` is `None`; otherwise searches
/// when `u < logistic((p - t)/scale)`.
pub fn search_decision(p: f64, t: f64, scale: Option<f64>, u: f64) -> bool {
    match scale {
        None => p > t,
        Some(_) => u < search_probability(p, t, scale),
    }
}

/// Reference values the generated data should reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scenario: Scenario,
    /// Average over stops of the change in search probability when the
    /// same stop is perceived as Hispanic rather than white.
    pub delta: f64,
    /// Population search rates among white- and Hispanic-perceived stops.
    pub search_rate_white: f64,
    pub search_rate_hispanic: f64,
    pub method: String,
    pub config_hash: String,
    pub n_drivers: usize,
    pub n_stops: usize,
}

const QUAD_HALF_WIDTH: f64 = 8.0;
const QUAD_INTERVALS: usize = 400;

/// `E[f(U)]` for `U ~ N(0, 1)` by composite Simpson's rule on `[-8, 8]`.
fn normal_expectation(f: impl Fn(f64) -> f64) -> f64 {
    let h = 2.0 * QUAD_HALF_WIDTH / QUAD_INTERVALS as f64;
    let density = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = 0.0;
    for i in 0..=QUAD_INTERVALS {
        let u = -QUAD_HALF_WIDTH + i as f64 * h;
        let w = if i == 0 || i == QUAD_INTERVALS {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * f(u) * density(u);
    }
    acc * h / 3.0
}

fn officer_mix(config: &SimConfig, f: impl Fn(bool) -> f64) -> f64 {
    let q = config.officers.hispanic_share;
    (1.0 - q) * f(false) + q * f(true)
}

/// Ground-truth effect by quadrature over the trait and officer race.
pub fn implied_delta(config: &SimConfig) -> f64 {
    let e = config.effective();
    normal_expectation(|u| {
        let z = config.trait_sd * u;
        officer_mix(config, |o| {
            search_probability(risk(z, true, &e.risk), threshold(true, o, &e.threshold), config.search_scale)
                - search_probability(risk(z, false, &e.risk), threshold(false, o, &e.threshold), config.search_scale)
        })
    })
}

/// Population search rates among white- and Hispanic-perceived stops, by
/// quadrature over the trait, appearance and officer race.
pub fn population_search_rates(config: &SimConfig) -> (f64, f64) {
    let e = config.effective();
    let a = &config.appearance;
    let cond_sd = (a.between_sd.powi(2) * (1.0 - a.trait_corr.powi(2)) + a.within_sd.powi(2)).sqrt();
    let joint = |hisp: bool| {
        normal_expectation(|u1| {
            let z = config.trait_sd * u1;
            let mean = a.mean + a.between_sd * a.trait_corr * u1;
            officer_mix(config, |o| {
                let pr = normal_expectation(|v| {
                    let r = perception_probability(mean + cond_sd * v, o, &e.perception);
                    if hisp {
                        r
                    } else {
                        1.0 - r
                    }
                });
                pr * search_probability(risk(z, hisp, &e.risk), threshold(hisp, o, &e.threshold), config.search_scale)
            })
        })
    };
    let share_h = normal_expectation(|u1| {
        let mean = a.mean + a.between_sd * a.trait_corr * u1;
        officer_mix(config, |o| normal_expectation(|v| perception_probability(mean + cond_sd * v, o, &e.perception)))
    });
    (joint(false) / (1.0 - share_h), joint(true) / share_h)
}

const SIM_START: (i32, u32, u32) = (2011, 1, 1);
const SIM_SPAN_DAYS: u64 = 4 * 365;

fn driver_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Officer races, drawn from their own stream.
fn officer_races(config: &SimConfig) -> Vec<bool> {
    let mut rng = driver_rng(config.seed, 0);
    (0..config.officers.n_officers).map(|_| rng.random::<f64>() < config.officers.hispanic_share).collect()
}

fn generate_driver(config: &SimConfig, e: &EffectiveParams, officers: &[bool], i: usize) -> Result<DriverPanel> {
    let mut rng = driver_rng(config.seed, i as u64 + 1);
    let n_stops = WeightedIndex::new(&config.stops_weights).map_err(|err| Error::Config(err.to_string()))?.sample(&mut rng) + 1;
    let u1: f64 = rng.sample(StandardNormal);
    let u2: f64 = rng.sample(StandardNormal);
    let a = &config.appearance;
    let z = config.trait_sd * u1;
    let mean_app = a.mean + a.between_sd * (a.trait_corr * u1 + (1.0 - a.trait_corr.powi(2)).sqrt() * u2);
    let start = config.state.min_valid_date().unwrap_or_else(|| NaiveDate::from_ymd_opt(SIM_START.0, SIM_START.1, SIM_START.2).unwrap());
    let duration = LogNormal::new(12f64.ln(), 0.6).expect("valid lognormal");
    let driver_id = DriverId::from_label(&format!("sim-{}-{i}", config.seed));

    let mut stops = Vec::with_capacity(n_stops);
    for j in 0..n_stops {
        let officer = rng.random_range(0..officers.len());
        let officer_hispanic = officers[officer];
        let county = rng.random_range(0..config.n_counties);
        let date = start + Days::new(rng.random_range(0..SIM_SPAN_DAYS));
        let hour: u8 = rng.random_range(0..24);
        let minutes = duration.sample(&mut rng);
        let noise: f64 = rng.sample(StandardNormal);
        let r = perception_probability(mean_app + a.within_sd * noise, officer_hispanic, &e.perception);
        let race = perceive_race(r, rng.random())?;
        let hisp = race == PerceivedRace::Hispanic;
        let p = risk(z, hisp, &e.risk);
        let t = threshold(hisp, officer_hispanic, &e.threshold);
        let searched = search_decision(p, t, config.search_scale, rng.random());
        let arrest_p = config.arrest.base + if searched { config.arrest.given_search } else { 0.0 };
        let arrested = rng.random::<f64>() < arrest_p;
        stops.push(StopRecord {
            state: config.state,
            stop_id: format!("sim-{i:07}-{j:02}"),
            date,
            hour: Some(hour),
            county: Some(format!("county{county:02}")),
            officer_id: Some(format!("officer{officer:04}")),
            perceived_race: race,
            searched,
            arrested: config.state.records_arrests().then_some(arrested),
            duration_minutes: config.state.records_duration().then_some((minutes * 10.0).round() / 10.0),
            link_fields: vec![],
        });
    }
    Ok(DriverPanel::new(driver_id, config.state, true, stops))
}

/// Generates `config.n_drivers` panels in parallel. Driver `i` draws from
/// its own stream of the seeded generator, so the output does not depend
/// on the thread count.
pub fn generate_panel(config: &SimConfig) -> Result<(Vec<DriverPanel>, GroundTruth)> {
    config.validate()?;
    let e = config.effective();
    let officers = officer_races(config);
    let mut panels: Vec<DriverPanel> =
        (0..config.n_drivers).into_par_iter().map(|i| generate_driver(config, &e, &officers, i)).collect::<Result<_>>()?;
    panels.sort_by_key(|p| p.driver_id);
    let (w, h) = population_search_rates(config);
    let truth = GroundTruth {
        scenario: config.scenario,
        delta: implied_delta(config),
        search_rate_white: w,
        search_rate_hispanic: h,
        method: format!("simpson quadrature, {QUAD_INTERVALS} intervals on [-{QUAD_HALF_WIDTH}, {QUAD_HALF_WIDTH}]"),
        config_hash: config.hash(),
        n_drivers: panels.len(),
        n_stops: panels.iter().map(DriverPanel::n_stops).sum(),
    };
    Ok((panels, truth))
}

/// Panels whose search outcome follows a logit with a driver intercept:
/// `P(search) = logistic(alpha_i + delta * hispanic)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitPanelConfig {
    pub n_drivers: usize,
    pub seed: u64,
    pub stops_weights: Vec<f64>,
    pub alpha_mean: f64,
    pub alpha_sd: f64,
    /// Log-odds of a Hispanic perception vary across drivers with this sd.
    pub perception_sd: f64,
    pub delta: f64,
}

pub fn generate_logit_panel(config: &LogitPanelConfig) -> Result<Vec<DriverPanel>> {
    let w = WeightedIndex::new(&config.stops_weights).map_err(|err| Error::Config(err.to_string()))?;
    if config.stops_weights.len() > MAX_STOPS_PER_DRIVER {
        return Err(Error::Config(format!("at most {MAX_STOPS_PER_DRIVER} stops per driver")));
    }
    let start = NaiveDate::from_ymd_opt(SIM_START.0, SIM_START.1, SIM_START.2).unwrap();
    let mut panels: Vec<DriverPanel> = (0..config.n_drivers)
        .into_par_iter()
        .map(|i| {
            let mut rng = driver_rng(config.seed, i as u64 + 1);
            let n = w.sample(&mut rng) + 1;
            let alpha = config.alpha_mean + config.alpha_sd * rng.sample::<f64, _>(StandardNormal);
            let pi = logistic(config.perception_sd * rng.sample::<f64, _>(StandardNormal));
            let stops = (0..n)
                .map(|j| {
                    let hisp = rng.random::<f64>() < pi;
                    let searched = rng.random::<f64>() < logistic(alpha + config.delta * f64::from(u8::from(hisp)));
                    StopRecord {
                        state: State::Co,
                        stop_id: format!("logit-{i:07}-{j:02}"),
                        date: start + Days::new(j as u64),
                        hour: Some(12),
                        county: Some("county00".into()),
                        officer_id: Some("officer0000".into()),
                        perceived_race: if hisp { PerceivedRace::Hispanic } else { PerceivedRace::White },
                        searched,
                        arrested: Some(false),
                        duration_minutes: None,
                        link_fields: vec![],
                    }
                })
                .collect();
            DriverPanel::new(DriverId::from_label(&format!("logit-{}-{i}", config.seed)), State::Co, true, stops)
        })
        .collect();
    panels.sort_by_key(|p| p.driver_id);
    Ok(panels)
}
