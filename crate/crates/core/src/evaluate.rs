//! Athlete-level benchmarking, consensus ranking and screening pages.
//!
//! An athlete is a true positive for a method when they carry a positive label and the
//! method flags at least one of their performances. By default any sanction record for
//! the athlete counts as a positive label regardless of its dates;
//! [`SanctionMatch::Window`] restricts labels to sanctions overlapping a date range.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detect::{DetectionResult, MethodId};
use crate::ingest::SanctionRecord;

pub const PAGE_SIZE: usize = 100;
pub const DEFAULT_KS: [usize; 3] = [50, 100, 200];
/// Explanations carried per athlete on a screening page.
const MAX_SNIPPETS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvaluateError {
    #[error("cursor {0:?} does not match the current results; restart from the first page")]
    StaleCursor(String),
    #[error("no materialized result for method {0}")]
    MissingMethod(MethodId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SanctionMatch {
    /// Any sanction makes the athlete a positive.
    #[default]
    AnyDate,
    /// Only sanctions overlapping `[from, to]` count.
    Window { from: NaiveDate, to: NaiveDate },
}

/// Set of athletes treated as positives.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Labels {
    ids: HashSet<String>,
}

impl Labels {
    pub fn from_sanctions(sanctions: &[SanctionRecord], mode: SanctionMatch) -> Labels {
        let ids = sanctions
            .iter()
            .filter(|s| match mode {
                SanctionMatch::AnyDate => true,
                SanctionMatch::Window { from, to } => s.overlaps(from, to),
            })
            .map(|s| s.athlete_id.clone())
            .collect();
        Labels { ids }
    }

    pub fn from_ids<I, S>(ids: I) -> Labels
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Labels { ids: ids.into_iter().map(Into::into).collect() }
    }

    pub fn contains(&self, athlete_id: &str) -> bool {
        self.ids.contains(athlete_id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Precision, recall and F1 from athlete counts, with every 0/0 taken as 0.
pub fn metrics_from_counts(tp: usize, fp: usize, positives: usize) -> (f64, f64, f64) {
    let ratio = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let p = ratio(tp as f64, (tp + fp) as f64);
    let r = ratio(tp as f64, positives as f64);
    let f1 = ratio(2.0 * p * r, p + r);
    (p, r, f1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method_id: MethodId,
    pub true_positives: usize,
    pub false_positives: usize,
    pub flagged_athletes: usize,
    pub flagged_performances: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_at_k: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusSummary {
    pub min_methods: usize,
    pub athletes: usize,
    pub true_positives: usize,
    pub precision: f64,
    pub recall: f64,
    /// `1 - athletes / athletes_in_slice`.
    pub reduction_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub slice: String,
    pub athletes_in_slice: usize,
    pub sanctioned_count: usize,
    pub methods: Vec<MethodMetrics>,
    pub consensus: Vec<ConsensusSummary>,
}

impl EvaluationReport {
    pub fn method(&self, id: MethodId) -> Option<&MethodMetrics> {
        self.methods.iter().find(|m| m.method_id == id)
    }

    /// Fixed-width text table in the layout of the published benchmark.
    pub fn to_table(&self) -> String {
        let ks: Vec<usize> = self
            .methods
            .first()
            .map(|m| m.precision_at_k.keys().copied().collect())
            .unwrap_or_default();
        let mut out = String::new();
        let _ = writeln!(
            out,
            "slice {}: {} athletes, {} sanctioned",
            self.slice, self.athletes_in_slice, self.sanctioned_count
        );
        let _ = write!(out, "{:<20} {:>6} {:>6} {:>6}", "method", "P", "R", "F1");
        for k in &ks {
            let _ = write!(out, " {:>6}", format!("P@{k}"));
        }
        let _ = writeln!(out, " {:>6} {:>7}", "TP", "FP");
        for m in &self.methods {
            let _ = write!(out, "{:<20} {:>6.3} {:>6.3} {:>6.3}", m.method_id.as_str(), m.precision, m.recall, m.f1);
            for k in &ks {
                let _ = write!(out, " {:>6.3}", m.precision_at_k[k]);
            }
            let _ = writeln!(out, " {:>6} {:>7}", m.true_positives, m.false_positives);
        }
        for c in &self.consensus {
            let _ = writeln!(
                out,
                "consensus >= {}: {} athletes ({:.1}% reduction), TP {}, P {:.3}, R {:.3}",
                c.min_methods,
                c.athletes,
                100.0 * c.reduction_ratio,
                c.true_positives,
                c.precision,
                c.recall
            );
        }
        out
    }
}

/// Fraction of the top `k` flagged athletes (by per-athlete maximum severity) that are
/// labelled positive. Fewer than `k` flagged athletes still divide by `k`.
pub fn precision_at_k(result: &DetectionResult, labels: &Labels, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let hits = result
        .ranked_athletes()
        .into_iter()
        .take(k)
        .filter(|(id, _)| labels.contains(id))
        .count();
    hits as f64 / k as f64
}

fn slice_athletes(results: &[DetectionResult]) -> BTreeSet<&str> {
    results.iter().flat_map(|r| r.athletes()).collect()
}

/// Per-method metrics plus consensus summaries for at least 2 and 3 methods.
pub fn evaluate_methods(results: &[DetectionResult], labels: &Labels, slice: &str, ks: &[usize]) -> EvaluationReport {
    let athletes = slice_athletes(results);
    let positives = athletes.iter().filter(|a| labels.contains(a)).count();
    let methods = results
        .iter()
        .map(|r| {
            let tp = r.athletes_flagged.iter().filter(|a| labels.contains(a)).count();
            let fp = r.athletes_flagged.len() - tp;
            let (precision, recall, f1) = metrics_from_counts(tp, fp, positives);
            MethodMetrics {
                method_id: r.method_id,
                true_positives: tp,
                false_positives: fp,
                flagged_athletes: r.athletes_flagged.len(),
                flagged_performances: r.flagged_count(),
                precision,
                recall,
                f1,
                precision_at_k: ks.iter().map(|&k| (k, precision_at_k(r, labels, k))).collect(),
            }
        })
        .collect();
    let entries = consensus(results, labels);
    let consensus = [2usize, 3]
        .into_iter()
        .map(|min| {
            let chosen: Vec<&ConsensusEntry> = entries.iter().filter(|e| e.method_count >= min).collect();
            let tp = chosen.iter().filter(|e| e.is_sanctioned).count();
            let (precision, recall, _) = metrics_from_counts(tp, chosen.len() - tp, positives);
            ConsensusSummary {
                min_methods: min,
                athletes: chosen.len(),
                true_positives: tp,
                precision,
                recall,
                reduction_ratio: if athletes.is_empty() { 0.0 } else { 1.0 - chosen.len() as f64 / athletes.len() as f64 },
            }
        })
        .collect();
    EvaluationReport {
        slice: slice.to_string(),
        athletes_in_slice: athletes.len(),
        sanctioned_count: positives,
        methods,
        consensus,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusEntry {
    pub athlete_id: String,
    pub methods_flagging: BTreeSet<MethodId>,
    pub method_count: usize,
    pub is_sanctioned: bool,
    /// Method-native score of the athlete's most anomalous flagged performance.
    pub top_scores: BTreeMap<MethodId, f64>,
    /// Best of `rank / flagged athletes` over the flagging methods (1-based rank).
    pub best_normalized_rank: f64,
}

/// Athletes flagged by at least two methods, most agreement first.
pub fn consensus(results: &[DetectionResult], labels: &Labels) -> Vec<ConsensusEntry> {
    let mut by_athlete: BTreeMap<&str, ConsensusEntry> = BTreeMap::new();
    for r in results {
        let ranked = r.ranked_athletes();
        let n = ranked.len() as f64;
        let best_score = best_native_scores(r);
        for (pos, (id, _)) in ranked.iter().enumerate() {
            let e = by_athlete.entry(id).or_insert_with(|| ConsensusEntry {
                athlete_id: id.to_string(),
                methods_flagging: BTreeSet::new(),
                method_count: 0,
                is_sanctioned: labels.contains(id),
                top_scores: BTreeMap::new(),
                best_normalized_rank: f64::INFINITY,
            });
            if e.methods_flagging.insert(r.method_id) {
                e.method_count += 1;
            }
            e.top_scores.insert(r.method_id, best_score[id]);
            e.best_normalized_rank = e.best_normalized_rank.min((pos + 1) as f64 / n);
        }
    }
    let mut out: Vec<ConsensusEntry> = by_athlete.into_values().filter(|e| e.method_count >= 2).collect();
    out.sort_by(|a, b| {
        b.method_count
            .cmp(&a.method_count)
            .then(a.best_normalized_rank.total_cmp(&b.best_normalized_rank))
            .then_with(|| a.athlete_id.cmp(&b.athlete_id))
    });
    out
}

/// Consensus entries narrowed by agreement count, label status and a method subset.
/// With a subset, only those methods count toward `method_count`.
pub fn filter_consensus(
    entries: &[ConsensusEntry],
    min_methods: usize,
    sanctioned: Option<bool>,
    methods: Option<&BTreeSet<MethodId>>,
) -> Vec<ConsensusEntry> {
    let mut out: Vec<ConsensusEntry> = entries
        .iter()
        .filter_map(|e| {
            let mut e = e.clone();
            if let Some(keep) = methods {
                e.methods_flagging.retain(|m| keep.contains(m));
                e.top_scores.retain(|m, _| keep.contains(m));
                e.method_count = e.methods_flagging.len();
            }
            let ok = e.method_count >= min_methods.max(1) && sanctioned.map_or(true, |s| e.is_sanctioned == s);
            ok.then_some(e)
        })
        .collect();
    out.sort_by(|a, b| {
        b.method_count
            .cmp(&a.method_count)
            .then(a.best_normalized_rank.total_cmp(&b.best_normalized_rank))
            .then_with(|| a.athlete_id.cmp(&b.athlete_id))
    });
    out
}

fn best_native_scores(r: &DetectionResult) -> HashMap<&str, f64> {
    let mut best: HashMap<&str, (f64, f64)> = HashMap::new();
    for e in r.flagged_entries() {
        let Some(score) = e.score else { continue };
        let sev = r.method_id.severity(score);
        let slot = best.entry(e.performance.athlete_id.as_str()).or_insert((f64::NEG_INFINITY, score));
        if sev > slot.0 {
            *slot = (sev, score);
        }
    }
    best.into_iter().map(|(k, (_, s))| (k, s)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenedAthlete {
    pub athlete_id: String,
    /// Method-native score of the most anomalous flagged performance.
    pub best_score: f64,
    pub flag_count: usize,
    /// Methods flagging this athlete among all materialized methods for the slice,
    /// this one included.
    pub method_count: usize,
    pub other_methods: Vec<MethodId>,
    pub is_sanctioned: bool,
    pub explanations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningPage {
    pub slice: String,
    pub method_id: MethodId,
    pub score_scale: String,
    pub total_flagged: usize,
    pub offset: usize,
    pub athletes: Vec<ScreenedAthlete>,
    pub next_cursor: Option<String>,
}

/// Short digest of a result's flag set, embedded in cursors.
pub fn flag_fingerprint(result: &DetectionResult) -> String {
    let mut h = Sha256::new();
    for e in result.flagged_entries() {
        h.update(e.performance.athlete_id.as_bytes());
        h.update(e.performance.index.to_le_bytes());
    }
    hex::encode(&h.finalize()[..6])
}

fn parse_cursor(cursor: &str, fingerprint: &str) -> Result<usize, EvaluateError> {
    let stale = || EvaluateError::StaleCursor(cursor.to_string());
    let (offset, fp) = cursor.split_once('.').ok_or_else(stale)?;
    if fp != fingerprint {
        return Err(stale());
    }
    offset.parse().map_err(|_| stale())
}

/// One page of athletes flagged by `method`, ordered by descending severity with ties by
/// athlete id. `results` holds every materialized method for the slice and feeds the
/// agreement badge.
pub fn build_screening_page(
    slice: &str,
    method: MethodId,
    results: &[DetectionResult],
    labels: &Labels,
    cursor: Option<&str>,
    page_size: usize,
) -> Result<ScreeningPage, EvaluateError> {
    let result = results
        .iter()
        .find(|r| r.method_id == method)
        .ok_or(EvaluateError::MissingMethod(method))?;
    let fingerprint = flag_fingerprint(result);
    let offset = match cursor {
        Some(c) if !c.is_empty() => parse_cursor(c, &fingerprint)?,
        _ => 0,
    };
    let ranked = result.ranked_athletes();
    if offset > ranked.len() {
        return Err(EvaluateError::StaleCursor(cursor.unwrap_or_default().to_string()));
    }
    let end = (offset + page_size.max(1)).min(ranked.len());
    let page_ids: HashSet<&str> = ranked[offset..end].iter().map(|(id, _)| *id).collect();

    let mut flags: HashMap<&str, (usize, Vec<String>)> = HashMap::new();
    for e in result.flagged_entries() {
        let id = e.performance.athlete_id.as_str();
        if !page_ids.contains(id) {
            continue;
        }
        let slot = flags.entry(id).or_default();
        slot.0 += 1;
        if slot.1.len() < MAX_SNIPPETS && !e.explanation.is_empty() {
            slot.1.push(e.explanation.clone());
        }
    }
    let best = best_native_scores(result);
    let athletes = ranked[offset..end]
        .iter()
        .map(|(id, _)| {
            let other_methods: Vec<MethodId> = results
                .iter()
                .filter(|r| r.method_id != method && r.athletes_flagged.contains(*id))
                .map(|r| r.method_id)
                .collect();
            let (flag_count, explanations) = flags.remove(id).unwrap_or_default();
            ScreenedAthlete {
                athlete_id: id.to_string(),
                best_score: best.get(id).copied().unwrap_or(f64::NAN),
                flag_count,
                method_count: other_methods.len() + 1,
                other_methods,
                is_sanctioned: labels.contains(id),
                explanations,
            }
        })
        .collect();
    Ok(ScreeningPage {
        slice: slice.to_string(),
        method_id: method,
        score_scale: result.score_scale.clone(),
        total_flagged: ranked.len(),
        offset,
        athletes,
        next_cursor: (end < ranked.len()).then(|| format!("{end}.{fingerprint}")),
    })
}
