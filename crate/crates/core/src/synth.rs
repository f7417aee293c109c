//! Synthetic datasets with known injected effects, and an exact oracle for the rule-based
//! detectors.
//!
//! Each athlete has a base time, a linear career slope and Gaussian noise around it, with
//! wind and round effects on top. Injected athletes get a time reduction from an onset
//! performance onward (a step by default, optionally a ramp). A configurable subset of
//! injected athletes receives sanction records dated after their last performance.
//!
//! Generation is seeded per athlete, so output is identical regardless of thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{AthleteHistory, DetectorConfig};
use crate::ingest::{
    is_wind_legal, write_competitions, write_results, write_sanctions, Centis, CompetitionRecord, IngestError,
    PerformanceRecord, Round, SanctionRecord,
};

const COUNTRIES: [&str; 20] = [
    "USA", "JAM", "GBR", "JPN", "CHN", "NGR", "RSA", "CAN", "FRA", "GER", "ITA", "BRA", "KEN", "TTO", "AUS", "CUB",
    "BAH", "BOT", "NED", "ESP",
];
const CATEGORIES: [(&str, f64); 5] =
    [("local", 0.35), ("national", 0.30), ("continental", 0.15), ("tour", 0.12), ("global", 0.08)];
const ROUNDS: [Round; 3] = [Round::Heat, Round::Semifinal, Round::Final];
const MIN_SECONDS: f64 = 5.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OnsetPolicy {
    /// Full effect from a uniformly chosen onset performance onward.
    Step,
    /// Effect grows linearly over `performances` races after onset.
    Ramp { performances: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionSpec {
    pub fraction_doped: f64,
    /// Exact number of injected athletes; overrides `fraction_doped`.
    pub doped_count: Option<usize>,
    /// Time reduction in seconds.
    pub effect_seconds: f64,
    pub onset: OnsetPolicy,
    /// Performances kept before onset; athletes with fewer than `min_pre_onset + 1`
    /// performances are never injected.
    pub min_pre_onset: usize,
    /// Share of injected athletes that receive a sanction record.
    pub sanction_fraction: f64,
    /// Exact number of sanctioned athletes; overrides `sanction_fraction`. When it exceeds
    /// the injected count the remainder is drawn from clean athletes.
    pub sanctioned_count: Option<usize>,
}

impl Default for InjectionSpec {
    fn default() -> Self {
        InjectionSpec {
            fraction_doped: 0.0,
            doped_count: None,
            effect_seconds: 0.4,
            onset: OnsetPolicy::Step,
            min_pre_onset: 3,
            sanction_fraction: 0.4,
            sanctioned_count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n_athletes: usize,
    pub event_code: String,
    /// Success probability of the geometric count distribution; counts are
    /// `1 + Geometric(p)` (median 7 at 0.1).
    pub count_p: f64,
    pub max_per_athlete: usize,
    /// Exact total number of performances; counts are adjusted to hit it.
    pub total_performances: Option<usize>,
    pub base_time_mean: f64,
    pub base_time_sd: f64,
    /// Seconds per year.
    pub slope_sd: f64,
    pub within_athlete_sd: f64,
    pub wind_sd: f64,
    pub wind_min: f64,
    pub wind_max: f64,
    pub wind_missing_rate: f64,
    /// Seconds per m/s of tailwind (negative: tailwind is faster).
    pub wind_effect: f64,
    pub reaction_mean: f64,
    pub reaction_sd: f64,
    pub reaction_missing_rate: f64,
    /// Added to heat times for semifinals and finals.
    pub semifinal_effect: f64,
    pub final_effect: f64,
    pub date_from: NaiveDate,
    pub date_to: NaiveDate,
    pub injection: InjectionSpec,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            n_athletes: 1000,
            event_code: "100m-men".into(),
            count_p: 0.1,
            max_per_athlete: 200,
            total_performances: None,
            base_time_mean: 11.0,
            base_time_sd: 0.4,
            slope_sd: 0.05,
            within_athlete_sd: 0.12,
            wind_sd: 1.0,
            wind_min: -3.0,
            wind_max: 4.0,
            wind_missing_rate: 0.02,
            wind_effect: -0.05,
            reaction_mean: 0.15,
            reaction_sd: 0.02,
            reaction_missing_rate: 0.15,
            semifinal_effect: -0.03,
            final_effect: -0.05,
            date_from: NaiveDate::from_ymd_opt(2010, 1, 1).expect("valid date"),
            date_to: NaiveDate::from_ymd_opt(2025, 12, 31).expect("valid date"),
            injection: InjectionSpec::default(),
            seed: 42,
        }
    }
}

impl GeneratorSpec {
    /// Scale of the published 100 m evaluation slice: 31,604 athletes, 381,447
    /// performances and 25 sanctioned athletes.
    pub fn table_one_scale() -> Self {
        GeneratorSpec {
            n_athletes: 31_604,
            total_performances: Some(381_447),
            injection: InjectionSpec {
                fraction_doped: 0.002,
                sanctioned_count: Some(25),
                ..InjectionSpec::default()
            },
            ..GeneratorSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        let rates = [
            self.wind_missing_rate,
            self.reaction_missing_rate,
            self.injection.fraction_doped,
            self.injection.sanction_fraction,
        ];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("rates must lie in [0, 1]");
        }
        if !(self.count_p > 0.0 && self.count_p <= 1.0) {
            return bad("count_p must lie in (0, 1]");
        }
        if self.injection.effect_seconds <= 0.0 || !self.injection.effect_seconds.is_finite() {
            return bad("effect_seconds must be positive");
        }
        if self.max_per_athlete == 0 || self.date_from >= self.date_to || self.event_code.is_empty() {
            return bad("max_per_athlete, date range and event_code must be non-empty");
        }
        if self.wind_min > self.wind_max {
            return bad("wind_min exceeds wind_max");
        }
        let sds = [self.base_time_sd, self.slope_sd, self.within_athlete_sd, self.wind_sd, self.reaction_sd];
        if sds.iter().any(|s| *s < 0.0 || !s.is_finite()) {
            return bad("standard deviations must be non-negative");
        }
        if let Some(total) = self.total_performances {
            if total < self.n_athletes || total > self.n_athletes * self.max_per_athlete {
                return bad("total_performances must be between n_athletes and n_athletes * max_per_athlete");
            }
        }
        if let OnsetPolicy::Ramp { performances: 0 } = self.injection.onset {
            return bad("ramp length must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedAthlete {
    pub athlete_id: String,
    /// Index of the first affected performance in the athlete's ordered history.
    pub onset_index: usize,
    pub onset_date: NaiveDate,
    pub effect_seconds: f64,
    pub sanctioned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: GeneratorSpec,
    pub n_athletes: usize,
    pub n_performances: usize,
    pub n_competitions: usize,
    pub injected: Vec<InjectedAthlete>,
    pub sanctioned: Vec<String>,
}

impl Manifest {
    pub fn injected_ids(&self) -> BTreeSet<&str> {
        self.injected.iter().map(|a| a.athlete_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub performances: Vec<PerformanceRecord>,
    pub competitions: Vec<CompetitionRecord>,
    pub sanctions: Vec<SanctionRecord>,
    pub manifest: Manifest,
}

impl SyntheticDataset {
    /// Writes `results.csv`, `competitions.csv`, `sanctions.csv` and `manifest.json`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir)?;
        write_results(fs::File::create(dir.join("results.csv"))?, &self.performances)?;
        write_competitions(fs::File::create(dir.join("competitions.csv"))?, &self.competitions)?;
        write_sanctions(fs::File::create(dir.join("sanctions.csv"))?, &self.sanctions)?;
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    /// Histories per athlete ordered by date then time, as the store returns them.
    pub fn histories(&self) -> Vec<AthleteHistory> {
        group_histories(&self.performances)
    }
}

/// Groups records by (athlete, event), each ordered by date then time.
pub fn group_histories(records: &[PerformanceRecord]) -> Vec<AthleteHistory> {
    let mut groups: BTreeMap<(&str, &str), Vec<PerformanceRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((&r.athlete_id, &r.event_code)).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|((a, e), mut perfs)| {
            perfs.sort_by(|x, y| x.date.cmp(&y.date).then(x.time.cmp(&y.time)));
            AthleteHistory { athlete_id: a.to_string(), event_code: e.to_string(), performances: perfs }
        })
        .collect()
}

fn athlete_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn performance_counts(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let geo = Geometric::new(spec.count_p).expect("validated p");
    let mut counts: Vec<usize> = (0..spec.n_athletes)
        .map(|_| (1 + geo.sample(rng) as usize).min(spec.max_per_athlete))
        .collect();
    if let Some(total) = spec.total_performances {
        let mut sum: usize = counts.iter().sum();
        while sum != total {
            let i = rng.gen_range(0..counts.len());
            if sum > total && counts[i] > 1 {
                counts[i] -= 1;
                sum -= 1;
            } else if sum < total && counts[i] < spec.max_per_athlete {
                counts[i] += 1;
                sum += 1;
            }
        }
    }
    counts
}

fn competitions(spec: &GeneratorSpec, total: usize, rng: &mut ChaCha8Rng) -> Vec<CompetitionRecord> {
    let n = (total / 4).clamp(200, 20_000);
    let days = (spec.date_to - spec.date_from).num_days();
    let mut dates: Vec<NaiveDate> = (0..n).map(|_| spec.date_from + Duration::days(rng.gen_range(0..=days))).collect();
    dates.sort();
    dates
        .into_iter()
        .enumerate()
        .map(|(i, date)| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let category = CATEGORIES
                .iter()
                .find(|(_, w)| {
                    acc += w;
                    u < acc
                })
                .map_or("local", |(c, _)| c);
            let country = COUNTRIES[rng.gen_range(0..COUNTRIES.len())];
            CompetitionRecord {
                competition_id: format!("C{i:05}"),
                name: format!("{country} {category} meeting {i}"),
                date,
                country: country.to_string(),
                venue: format!("Stadium {}", i % 997),
                category: Some(category.to_string()),
                event_codes: [spec.event_code.clone()].into(),
            }
        })
        .collect()
}

struct Plan {
    count: usize,
    onset: Option<usize>,
}

fn athlete_performances(
    spec: &GeneratorSpec,
    idx: usize,
    plan: &Plan,
    comps: &[CompetitionRecord],
) -> Vec<PerformanceRecord> {
    let mut rng = athlete_rng(spec.seed, idx as u64 + 1);
    let n = plan.count;
    let window_days = (spec.date_to - spec.date_from).num_days() as f64;
    let career_days = (n as f64 * rng.gen_range(30.0..200.0)).clamp(120.0, window_days);
    let start = spec.date_from + Duration::days(rng.gen_range(0.0..=(window_days - career_days)) as i64);
    let end = start + Duration::days(career_days as i64);
    let mut lo = comps.partition_point(|c| c.date < start);
    let mut hi = comps.partition_point(|c| c.date <= end);
    // at most one race per (competition, round)
    while (hi - lo) * ROUNDS.len() < n {
        lo = lo.saturating_sub(n);
        hi = (hi + n).min(comps.len());
    }
    let mut slots: Vec<(usize, usize)> = sample(&mut rng, (hi - lo) * ROUNDS.len(), n)
        .into_iter()
        .map(|s| (lo + s / ROUNDS.len(), s % ROUNDS.len()))
        .collect();
    slots.sort_unstable();

    let normal = |m: f64, s: f64| Normal::new(m, s).expect("finite parameters");
    let base = normal(spec.base_time_mean, spec.base_time_sd).sample(&mut rng);
    let slope = normal(0.0, spec.slope_sd).sample(&mut rng);
    let noise = normal(0.0, spec.within_athlete_sd);
    let wind = normal(0.0, spec.wind_sd);
    let reaction = normal(spec.reaction_mean, spec.reaction_sd);
    let country = COUNTRIES[rng.gen_range(0..COUNTRIES.len())];
    let first_date = comps[slots[0].0].date;
    slots
        .iter()
        .enumerate()
        .map(|(j, &(c, r))| {
            let comp = &comps[c];
            let round = ROUNDS[r];
            let w = loop {
                let w = (wind.sample(&mut rng) * 10.0).round() / 10.0;
                if (spec.wind_min..=spec.wind_max).contains(&w) {
                    break w;
                }
            };
            let years = (comp.date - first_date).num_days() as f64 / 365.25;
            let round_effect = match round {
                Round::Semifinal => spec.semifinal_effect,
                Round::Final => spec.final_effect,
                _ => 0.0,
            };
            let mut t = base + slope * years + round_effect + spec.wind_effect * w + noise.sample(&mut rng);
            if let Some(onset) = plan.onset {
                if j >= onset {
                    let scale = match spec.injection.onset {
                        OnsetPolicy::Step => 1.0,
                        OnsetPolicy::Ramp { performances } => ((j - onset + 1) as f64 / performances as f64).min(1.0),
                    };
                    t -= spec.injection.effect_seconds * scale;
                }
            }
            let wind_mps = (rng.gen::<f64>() >= spec.wind_missing_rate).then_some(w);
            let reaction_s = (rng.gen::<f64>() >= spec.reaction_missing_rate)
                .then(|| (reaction.sample(&mut rng).max(0.1) * 1000.0).round() / 1000.0);
            PerformanceRecord {
                athlete_id: format!("ATH{idx:06}"),
                athlete_name: format!("Athlete {idx}"),
                competition_id: comp.competition_id.clone(),
                event_code: spec.event_code.clone(),
                time: Centis::from_seconds(t.max(MIN_SECONDS)).expect("positive time"),
                date: comp.date,
                wind_mps,
                reaction_time_s: reaction_s,
                round,
                rank: Some(rng.gen_range(1..=8)),
                country: country.to_string(),
                country_known: true,
                venue: comp.venue.clone(),
                wind_legal: is_wind_legal(wind_mps),
            }
        })
        .collect()
}

/// Generates a dataset; identical specs give identical output.
pub fn generate(spec: &GeneratorSpec) -> Result<SyntheticDataset, SynthError> {
    spec.validate()?;
    let mut rng = athlete_rng(spec.seed, 0);
    let counts = performance_counts(spec, &mut rng);
    let total: usize = counts.iter().sum();
    let comps = competitions(spec, total, &mut rng);

    let inj = &spec.injection;
    let eligible: Vec<usize> = (0..spec.n_athletes).filter(|&i| counts[i] > inj.min_pre_onset).collect();
    let n_doped = inj
        .doped_count
        .unwrap_or_else(|| (inj.fraction_doped * spec.n_athletes as f64).round() as usize)
        .min(eligible.len());
    let mut doped: Vec<usize> = eligible.choose_multiple(&mut rng, n_doped).copied().collect();
    doped.sort_unstable();
    let mut onsets: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in &doped {
        onsets.insert(i, rng.gen_range(inj.min_pre_onset..counts[i]));
    }
    let n_sanctioned = inj
        .sanctioned_count
        .unwrap_or_else(|| (inj.sanction_fraction * n_doped as f64).round() as usize)
        .min(spec.n_athletes);
    let mut sanctioned: Vec<usize> = doped.choose_multiple(&mut rng, n_sanctioned.min(n_doped)).copied().collect();
    if n_sanctioned > n_doped {
        let clean: Vec<usize> = (0..spec.n_athletes).filter(|i| !onsets.contains_key(i)).collect();
        sanctioned.extend(clean.choose_multiple(&mut rng, n_sanctioned - n_doped));
    }
    sanctioned.sort_unstable();
    let sanction_draws: Vec<(i64, Option<i64>)> = sanctioned
        .iter()
        .map(|_| (rng.gen_range(30..720), [Some(730), Some(1461), None][rng.gen_range(0..3)]))
        .collect();

    let per_athlete: Vec<Vec<PerformanceRecord>> = (0..spec.n_athletes)
        .into_par_iter()
        .map(|i| athlete_performances(spec, i, &Plan { count: counts[i], onset: onsets.get(&i).copied() }, &comps))
        .collect();

    let injected = onsets
        .iter()
        .map(|(&i, &onset)| InjectedAthlete {
            athlete_id: format!("ATH{i:06}"),
            onset_index: onset,
            onset_date: per_athlete[i][onset].date,
            effect_seconds: inj.effect_seconds,
            sanctioned: sanctioned.binary_search(&i).is_ok(),
        })
        .collect();
    let sanctions = sanctioned
        .iter()
        .zip(&sanction_draws)
        .map(|(&i, &(lag, length))| {
            let last = per_athlete[i].last().expect("non-empty").date;
            let start = last + Duration::days(lag);
            SanctionRecord {
                athlete_id: format!("ATH{i:06}"),
                sanction_start: start,
                sanction_end: length.map(|d| start + Duration::days(d)),
                source_note: if onsets.contains_key(&i) { "synthetic: injected".into() } else { "synthetic: clean".into() },
            }
        })
        .collect();
    let performances: Vec<PerformanceRecord> = per_athlete.into_iter().flatten().collect();
    let manifest = Manifest {
        spec: spec.clone(),
        n_athletes: spec.n_athletes,
        n_performances: performances.len(),
        n_competitions: comps.len(),
        injected,
        sanctioned: sanctioned.iter().map(|i| format!("ATH{i:06}")).collect(),
    };
    Ok(SyntheticDataset { performances, competitions: comps, sanctions, manifest })
}

fn record(athlete: &str, j: usize, start: NaiveDate, days_apart: i64, seconds: f64) -> PerformanceRecord {
    PerformanceRecord {
        athlete_id: athlete.to_string(),
        athlete_name: athlete.to_string(),
        competition_id: format!("G{j:05}"),
        event_code: "100m-men".into(),
        time: Centis::from_seconds(seconds.max(0.01)).expect("positive time"),
        date: start + Duration::days(j as i64 * days_apart),
        wind_mps: Some(0.0),
        reaction_time_s: Some(0.15),
        round: Round::Final,
        rank: None,
        country: "USA".into(),
        country_known: true,
        venue: "Synthetic".into(),
        wind_legal: true,
    }
}

/// Population parameters of the hierarchical trajectory model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HierParams {
    pub mu_alpha: f64,
    pub mu_beta: f64,
    pub tau_alpha: f64,
    pub tau_beta: f64,
    pub sigma: f64,
}

impl Default for HierParams {
    fn default() -> Self {
        HierParams { mu_alpha: 11.0, mu_beta: -0.02, tau_alpha: 0.3, tau_beta: 0.03, sigma: 0.1 }
    }
}

/// Histories drawn from the hierarchical model, `per_athlete` races `days_apart` days
/// apart, times rounded to centiseconds.
pub fn hierarchical_histories(
    n_athletes: usize,
    per_athlete: usize,
    days_apart: i64,
    params: &HierParams,
    seed: u64,
) -> Vec<AthleteHistory> {
    let start = NaiveDate::from_ymd_opt(2012, 1, 1).expect("valid date");
    (0..n_athletes)
        .map(|i| {
            let mut rng = athlete_rng(seed, i as u64);
            let z = Normal::new(0.0, 1.0).expect("unit normal");
            let a = params.mu_alpha + params.tau_alpha * z.sample(&mut rng);
            let b = params.mu_beta + params.tau_beta * z.sample(&mut rng);
            let id = format!("H{i:05}");
            let perfs = (0..per_athlete)
                .map(|j| {
                    let t = (j as i64 * days_apart) as f64 / 365.25;
                    record(&id, j, start, days_apart, a + b * t + params.sigma * z.sample(&mut rng))
                })
                .collect();
            AthleteHistory { athlete_id: id.clone(), event_code: "100m-men".into(), performances: perfs }
        })
        .collect()
}

/// Independent Gaussian times per athlete, rounded to centiseconds.
pub fn gaussian_histories(n_athletes: usize, per_athlete: usize, mean: f64, sd: f64, seed: u64) -> Vec<AthleteHistory> {
    let start = NaiveDate::from_ymd_opt(2012, 1, 1).expect("valid date");
    let dist = Normal::new(mean, sd).expect("finite parameters");
    (0..n_athletes)
        .map(|i| {
            let mut rng = athlete_rng(seed, i as u64);
            let id = format!("N{i:05}");
            let perfs = (0..per_athlete).map(|j| record(&id, j, start, 7, dist.sample(&mut rng))).collect();
            AthleteHistory { athlete_id: id.clone(), event_code: "100m-men".into(), performances: perfs }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleRule {
    Zscore,
    Mad,
    Iqr,
    Excess,
}

/// Identifies a performance independently of any history ordering.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PerfKey {
    pub athlete_id: String,
    pub competition_id: String,
    pub round: Round,
}

impl PerfKey {
    pub fn of(p: &PerformanceRecord) -> PerfKey {
        PerfKey { athlete_id: p.athlete_id.clone(), competition_id: p.competition_id.clone(), round: p.round }
    }
}

fn rat(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite threshold")
}

fn int(x: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(x))
}

fn median_of(sorted: &[BigRational]) -> BigRational {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2].clone()
    } else {
        (&sorted[n / 2 - 1] + &sorted[n / 2]) / int(2)
    }
}

/// Flags by the literal rule formulas in exact rational arithmetic over centiseconds.
///
/// Records are grouped per athlete and event; groups smaller than `min_history` are
/// ignored. Quartiles are medians of the lower and upper halves, excluding the middle
/// value for odd counts.
pub fn oracle_flags(records: &[PerformanceRecord], rule: OracleRule, config: &DetectorConfig) -> BTreeSet<PerfKey> {
    let mut groups: BTreeMap<(&str, &str), Vec<&PerformanceRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((&r.athlete_id, &r.event_code)).or_default().push(r);
    }
    let mut flagged = BTreeSet::new();
    for perfs in groups.values() {
        let n = perfs.len();
        if n < config.min_history {
            continue;
        }
        let x: Vec<BigRational> = perfs.iter().map(|p| int(i64::from(p.time.0))).collect();
        let mean = x.iter().fold(BigRational::zero(), |acc, v| acc + v) / int(n as i64);
        // sample variance
        let var = if n > 1 {
            x.iter().fold(BigRational::zero(), |acc, v| acc + (v - &mean) * (v - &mean)) / int(n as i64 - 1)
        } else {
            BigRational::zero()
        };
        let mut sorted = x.clone();
        sorted.sort();
        let median = median_of(&sorted);
        let mut dev: Vec<BigRational> = x.iter().map(|v| (v - &median).abs()).collect();
        dev.sort();
        let mad = median_of(&dev);
        let (lower, upper) = if n == 1 { (&sorted[..], &sorted[..]) } else { (&sorted[..n / 2], &sorted[(n + 1) / 2..]) };
        let (q1, q3) = (median_of(lower), median_of(upper));
        let iqr = &q3 - &q1;

        for (p, v) in perfs.iter().zip(&x) {
            let d = v - &mean;
            let hit = match rule {
                // |x - mean| / sd > T  <=>  (x - mean)^2 > T^2 var
                OracleRule::Zscore => !var.is_zero() && &d * &d > rat(config.z_threshold).pow(2) * &var,
                OracleRule::Mad => {
                    !mad.is_zero() && (rat(config.mad_scale) * (v - &median) / &mad).abs() > rat(config.mad_threshold)
                }
                OracleRule::Iqr => {
                    let k = rat(config.iqr_multiplier) * &iqr;
                    *v < &q1 - &k || *v > &q3 + &k
                }
                // (x - mean) / sd < E with E < 0  <=>  x < mean and (x - mean)^2 > E^2 var
                OracleRule::Excess => {
                    let e = rat(config.excess_threshold);
                    !var.is_zero()
                        && if e.is_negative() {
                            d.is_negative() && &d * &d > e.pow(2) * &var
                        } else {
                            !d.is_negative() && &d * &d < e.pow(2) * &var || d.is_negative()
                        }
                }
            };
            if hit {
                flagged.insert(PerfKey::of(p));
            }
        }
    }
    flagged
}
