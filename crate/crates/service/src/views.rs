//! Read-only views assembled from the store and materialized results.

use std::collections::BTreeSet;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use trackscreen_core::detect::stat::AthleteBaseline;
use trackscreen_core::evaluate::{consensus, evaluate_methods, filter_consensus, SanctionMatch, DEFAULT_KS};
use trackscreen_core::ingest::SanctionRecord;
use trackscreen_core::{ConsensusEntry, DetectionResult, EntryStatus, EvaluationReport, EventSlice, MethodId, Round, Store};

use crate::error::ApiError;

const MAX_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMark {
    pub method_id: MethodId,
    pub status: EntryStatus,
    pub flagged: bool,
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub index: usize,
    pub date: NaiveDate,
    pub time_seconds: f64,
    pub wind_mps: Option<f64>,
    pub round: Round,
    pub competition_id: String,
    pub venue: String,
    pub marks: Vec<MethodMark>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Box-plot summary with Tukey hinges, matching the per-athlete baselines the rules use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub sd: f64,
    pub histogram: Vec<HistogramBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagNote {
    pub method_id: MethodId,
    pub index: usize,
    pub date: NaiveDate,
    pub competition_id: String,
    pub score: Option<f64>,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReviewView {
    pub athlete_id: String,
    pub athlete_name: String,
    pub slice: String,
    pub is_sanctioned: bool,
    pub sanctions: Vec<SanctionRecord>,
    pub methods_flagging: Vec<MethodId>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub summary: DistributionSummary,
    pub flags: Vec<FlagNote>,
    /// Methods whose stored result predates the current data.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stale_methods: Vec<MethodId>,
}

/// Five-number summary, mean, SD and an equal-width histogram with `ceil(sqrt(n))` bins
/// (at most 20); the last bin is closed on the right.
pub fn distribution_summary(times: &[f64]) -> Option<DistributionSummary> {
    let b = AthleteBaseline::compute(times)?;
    let min = times.iter().copied().fold(f64::INFINITY, f64::min);
    let max = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = ((times.len() as f64).sqrt().ceil() as usize).clamp(1, MAX_BINS);
    let width = (max - min) / bins as f64;
    let mut histogram: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lower: min + width * i as f64,
            upper: if i + 1 == bins { max } else { min + width * (i + 1) as f64 },
            count: 0,
        })
        .collect();
    for &t in times {
        let i = if width > 0.0 { (((t - min) / width) as usize).min(bins - 1) } else { 0 };
        histogram[i].count += 1;
    }
    Some(DistributionSummary {
        n: b.n,
        min,
        q1: b.q1,
        median: b.median,
        q3: b.q3,
        max,
        mean: b.mean,
        sd: b.std,
        histogram,
    })
}

fn results_for(store: &Store, slice: &EventSlice) -> Result<Vec<(DetectionResult, bool)>, ApiError> {
    let data_version = store.data_version()?;
    let all = store.materialized_for_slice(slice)?;
    if all.is_empty() {
        return Err(ApiError::not_materialized(&slice.to_string()));
    }
    Ok(all.iter().map(|m| (m.result.clone(), m.data_version != data_version)).collect())
}

pub fn case_review(store: &Store, slice: &EventSlice, athlete_id: &str) -> Result<CaseReviewView, ApiError> {
    let perfs = store.athlete_history(slice, athlete_id)?;
    if perfs.is_empty() {
        return Err(ApiError::not_found("unknown_athlete", format!("athlete {athlete_id} has no performances in {slice}")));
    }
    let results = results_for(store, slice)?;
    let sanctions: Vec<SanctionRecord> =
        store.sanctions()?.into_iter().filter(|s| s.athlete_id == athlete_id).collect();

    let mut trajectory: Vec<TrajectoryPoint> = perfs
        .iter()
        .enumerate()
        .map(|(i, p)| TrajectoryPoint {
            index: i,
            date: p.date,
            time_seconds: p.time_seconds(),
            wind_mps: p.wind_mps,
            round: p.round,
            competition_id: p.competition_id.clone(),
            venue: p.venue.clone(),
            marks: Vec::new(),
        })
        .collect();
    let mut flags = Vec::new();
    let mut flagging = BTreeSet::new();
    let mut stale_methods = Vec::new();
    for (r, stale) in &results {
        if *stale {
            stale_methods.push(r.method_id);
        }
        for e in r.entries.iter().filter(|e| e.performance.athlete_id == athlete_id) {
            let i = e.performance.index as usize;
            let Some(point) = trajectory.get_mut(i) else { continue };
            if point.competition_id != e.performance.competition_id {
                continue;
            }
            point.marks.push(MethodMark {
                method_id: r.method_id,
                status: e.status,
                flagged: e.flagged,
                score: e.score,
                explanation: e.explanation.clone(),
            });
            if e.flagged {
                flagging.insert(r.method_id);
                flags.push(FlagNote {
                    method_id: r.method_id,
                    index: i,
                    date: point.date,
                    competition_id: point.competition_id.clone(),
                    score: e.score,
                    explanation: e.explanation.clone(),
                });
            }
        }
    }
    let times: Vec<f64> = perfs.iter().map(|p| p.time_seconds()).collect();
    Ok(CaseReviewView {
        athlete_id: athlete_id.to_string(),
        athlete_name: perfs[0].athlete_name.clone(),
        slice: slice.to_string(),
        is_sanctioned: !sanctions.is_empty(),
        sanctions,
        methods_flagging: flagging.into_iter().collect(),
        trajectory,
        summary: distribution_summary(&times).expect("non-empty history"),
        flags,
        stale_methods,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsensusQuery {
    pub min_methods: Option<usize>,
    pub sanctioned: Option<bool>,
    /// Restricts agreement counting to these methods.
    pub methods: Option<BTreeSet<MethodId>>,
}

pub fn consensus_view(store: &Store, slice: &EventSlice, q: &ConsensusQuery) -> Result<Vec<ConsensusEntry>, ApiError> {
    let results: Vec<DetectionResult> = results_for(store, slice)?.into_iter().map(|(r, _)| r).collect();
    let labels = store.labels(SanctionMatch::AnyDate)?;
    let entries = consensus(&results, &labels);
    Ok(filter_consensus(&entries, q.min_methods.unwrap_or(2), q.sanctioned, q.methods.as_ref()))
}

pub fn evaluation_view(store: &Store, slice: &EventSlice, ks: Option<&[usize]>) -> Result<EvaluationReport, ApiError> {
    let results: Vec<DetectionResult> = results_for(store, slice)?.into_iter().map(|(r, _)| r).collect();
    let labels = store.labels(SanctionMatch::AnyDate)?;
    Ok(evaluate_methods(&results, &labels, &slice.to_string(), ks.unwrap_or(&DEFAULT_KS)))
}
