//! Uniform detector contract.
//!
//! Every method consumes the same athlete histories and produces a [`DetectionResult`]
//! with one entry per input performance. Scores are method-native and not comparable
//! across methods; [`MethodId::severity`] maps a score onto a "larger is more anomalous"
//! scale for ranking within one method.

pub mod bayes;
pub mod copula;
pub mod features;
pub mod gbt;
pub mod iforest;
pub mod stat;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::PerformanceRecord;

/// Bumped whenever a detector's numerical behaviour changes; part of every cache key.
pub const DETECTOR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("invalid athlete history: {0}")]
    InvalidHistory(String),
    #[error("gradient boosting failed: {0}")]
    Boosting(#[from] gbt::GbtError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MethodId {
    #[serde(rename = "zscore")]
    ZScore,
    #[serde(rename = "mad")]
    Mad,
    #[serde(rename = "iqr")]
    Iqr,
    #[serde(rename = "iforest")]
    IsolationForest,
    #[serde(rename = "gbt_residual")]
    GbtResidual,
    #[serde(rename = "excess_performance")]
    ExcessPerformance,
    #[serde(rename = "bayes_hier")]
    BayesHier,
    #[serde(rename = "copula")]
    Copula,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    /// Statistical rules.
    ST,
    /// Machine learning.
    ML,
    /// Temporal / trajectory.
    TM,
    /// Bayesian.
    BS,
    /// Multivariate.
    MV,
}

impl MethodId {
    pub const ALL: [MethodId; 8] = [
        MethodId::ZScore,
        MethodId::Mad,
        MethodId::Iqr,
        MethodId::IsolationForest,
        MethodId::GbtResidual,
        MethodId::ExcessPerformance,
        MethodId::BayesHier,
        MethodId::Copula,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::ZScore => "zscore",
            MethodId::Mad => "mad",
            MethodId::Iqr => "iqr",
            MethodId::IsolationForest => "iforest",
            MethodId::GbtResidual => "gbt_residual",
            MethodId::ExcessPerformance => "excess_performance",
            MethodId::BayesHier => "bayes_hier",
            MethodId::Copula => "copula",
        }
    }

    pub fn category(self) -> Category {
        match self {
            MethodId::ZScore | MethodId::Mad | MethodId::Iqr => Category::ST,
            MethodId::IsolationForest | MethodId::GbtResidual => Category::ML,
            MethodId::ExcessPerformance => Category::TM,
            MethodId::BayesHier => Category::BS,
            MethodId::Copula => Category::MV,
        }
    }

    /// Methods that score each athlete against their own history only.
    pub fn is_per_athlete(self) -> bool {
        matches!(
            self,
            MethodId::ZScore | MethodId::Mad | MethodId::Iqr | MethodId::ExcessPerformance
        )
    }

    /// Maps a method-native score to a scale where larger means more anomalous.
    pub fn severity(self, score: f64) -> f64 {
        match self {
            MethodId::ZScore | MethodId::Mad => score.abs(),
            MethodId::Iqr | MethodId::IsolationForest | MethodId::GbtResidual => score,
            MethodId::ExcessPerformance | MethodId::Copula => -score,
            MethodId::BayesHier => 1.0 - score,
        }
    }

    /// Human description of the score each entry carries.
    pub fn score_scale(self) -> &'static str {
        match self {
            MethodId::ZScore => "z = (x - mean) / sd over the athlete's career; |z| ranks",
            MethodId::Mad => "robust z* = 0.6745 (x - median) / MAD; |z*| ranks",
            MethodId::Iqr => "seconds beyond the nearest Tukey fence (negative inside); larger ranks",
            MethodId::IsolationForest => "isolation score s in (0, 1]; larger ranks",
            MethodId::GbtResidual => "absolute residual |y - y_hat| in seconds; larger ranks",
            MethodId::ExcessPerformance => "EP = (x - mean_i) / sd_i; more negative ranks",
            MethodId::BayesHier => "two-sided posterior predictive tail probability; smaller ranks",
            MethodId::Copula => "Gaussian copula log-density; smaller ranks",
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = DetectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| DetectError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodInfo {
    pub method_id: MethodId,
    pub name: &'static str,
    pub category: Category,
    pub key_idea: &'static str,
    pub complexity_note: &'static str,
    pub score_scale: &'static str,
}

pub fn list_methods() -> Vec<MethodInfo> {
    MethodId::ALL
        .into_iter()
        .map(|m| {
            let (name, key_idea, complexity_note) = match m {
                MethodId::ZScore => ("Z-Score", "Performances more than 3 SD from the career mean", "O(n)"),
                MethodId::Mad => ("Robust Z (MAD)", "Median absolute deviation threshold", "O(n log n)"),
                MethodId::Iqr => ("IQR Method", "Tukey fences at 1.5 x IQR", "O(n log n)"),
                MethodId::IsolationForest => ("Isolation Forest", "Anomalies need fewer random splits to isolate", "O(n log n)"),
                MethodId::GbtResidual => ("Boosted Residual", "Residuals of a context-only boosted model above the 95th percentile", "O(n log n)"),
                MethodId::ExcessPerformance => ("Excess Performance", "Career trajectory deviation below -2.5 SD", "O(n)"),
                MethodId::BayesHier => ("Hierarchical", "Posterior predictive p < 0.05 under random intercepts and slopes", "O(n * MCMC)"),
                MethodId::Copula => ("Gaussian Copula", "Joint (time, wind, reaction) copula density in the bottom 5%", "O(n^2)"),
            };
            MethodInfo {
                method_id: m,
                name,
                category: m.category(),
                key_idea,
                complexity_note,
                score_scale: m.score_scale(),
            }
        })
        .collect()
}

/// Chronologically ordered performances of one athlete within one event slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AthleteHistory {
    pub athlete_id: String,
    pub event_code: String,
    pub performances: Vec<PerformanceRecord>,
}

impl AthleteHistory {
    pub fn new(
        athlete_id: impl Into<String>,
        event_code: impl Into<String>,
        performances: Vec<PerformanceRecord>,
    ) -> Result<Self, DetectError> {
        let h = AthleteHistory {
            athlete_id: athlete_id.into(),
            event_code: event_code.into(),
            performances,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        if self.performances.is_empty() {
            return Err(DetectError::InvalidHistory(format!(
                "{} has no performances",
                self.athlete_id
            )));
        }
        for p in &self.performances {
            if p.athlete_id != self.athlete_id || p.event_code != self.event_code {
                return Err(DetectError::InvalidHistory(format!(
                    "performance of {}/{} in history of {}/{}",
                    p.athlete_id, p.event_code, self.athlete_id, self.event_code
                )));
            }
        }
        if self.performances.windows(2).any(|w| w[0].date > w[1].date) {
            return Err(DetectError::InvalidHistory(format!(
                "{} has dates out of order",
                self.athlete_id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.performances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.performances.is_empty()
    }

    pub fn times_seconds(&self) -> Vec<f64> {
        self.performances.iter().map(|p| p.time_seconds()).collect()
    }

    /// Times as whole centiseconds; the rule-based detectors work on these so that
    /// medians, hinges and fences are exact.
    pub fn times_centis(&self) -> Vec<f64> {
        self.performances.iter().map(|p| f64::from(p.time.0)).collect()
    }
}

/// Detector hyperparameters. Defaults are the published settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub z_threshold: f64,
    pub mad_threshold: f64,
    pub mad_scale: f64,
    pub iqr_multiplier: f64,
    pub excess_threshold: f64,
    pub min_history: usize,
    pub iforest_trees: usize,
    pub iforest_contamination: f64,
    pub gbt_trees: usize,
    pub gbt_depth: usize,
    pub gbt_learning_rate: f64,
    pub gbt_residual_quantile: f64,
    pub mcmc_draws: usize,
    pub mcmc_warmup: usize,
    pub mcmc_chains: usize,
    pub bayes_p_threshold: f64,
    /// Flag only unusually fast performances in the posterior predictive check.
    pub bayes_one_sided: bool,
    pub copula_density_quantile: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            z_threshold: 3.0,
            mad_threshold: 3.5,
            mad_scale: 0.6745,
            iqr_multiplier: 1.5,
            excess_threshold: -2.5,
            min_history: 3,
            iforest_trees: 100,
            iforest_contamination: 0.1,
            gbt_trees: 100,
            gbt_depth: 3,
            gbt_learning_rate: 0.1,
            gbt_residual_quantile: 0.95,
            mcmc_draws: 500,
            mcmc_warmup: 200,
            mcmc_chains: 4,
            bayes_p_threshold: 0.05,
            bayes_one_sided: false,
            copula_density_quantile: 0.05,
            seed: 42,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        let bad = |msg: String| Err(DetectError::InvalidConfig(msg));
        let reals = [
            ("z_threshold", self.z_threshold),
            ("mad_threshold", self.mad_threshold),
            ("mad_scale", self.mad_scale),
            ("iqr_multiplier", self.iqr_multiplier),
            ("excess_threshold", self.excess_threshold),
            ("gbt_learning_rate", self.gbt_learning_rate),
        ];
        for (name, v) in reals {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        let unit = [
            ("iforest_contamination", self.iforest_contamination),
            ("gbt_residual_quantile", self.gbt_residual_quantile),
            ("bayes_p_threshold", self.bayes_p_threshold),
            ("copula_density_quantile", self.copula_density_quantile),
        ];
        for (name, v) in unit {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        let counts = [
            ("min_history", self.min_history),
            ("iforest_trees", self.iforest_trees),
            ("gbt_trees", self.gbt_trees),
            ("gbt_depth", self.gbt_depth),
            ("mcmc_draws", self.mcmc_draws),
            ("mcmc_warmup", self.mcmc_warmup),
            ("mcmc_chains", self.mcmc_chains),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.mad_scale <= 0.0 || self.gbt_learning_rate <= 0.0 {
            return bad("mad_scale and gbt_learning_rate must be positive".into());
        }
        if self.gbt_depth > 16 {
            return bad("gbt_depth must be at most 16".into());
        }
        Ok(())
    }

    /// Stable hex digest identifying this configuration and the detector version.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(DETECTOR_VERSION.to_le_bytes());
        h.update(serde_json::to_vec(self).expect("config serializes"));
        hex::encode(&h.finalize()[..16])
    }
}

/// Extra per-slice context that is not part of the performance rows.
#[derive(Debug, Clone, Default)]
pub struct DetectContext {
    /// Competition id to level ordinal; missing ids are level 0.
    pub competition_levels: HashMap<String, u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Scored,
    InsufficientHistory,
    MissingFeatures,
    /// The method could not run on this slice (too few rows, degenerate target, ...).
    Skipped,
}

/// Identifies a performance by its position in the athlete's ordered slice history.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PerformanceRef {
    pub athlete_id: String,
    pub index: u32,
    pub competition_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEntry {
    pub performance: PerformanceRef,
    pub status: EntryStatus,
    pub flagged: bool,
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub method_id: MethodId,
    pub score_scale: String,
    pub entries: Vec<DetectionEntry>,
    pub athletes_flagged: BTreeSet<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub wall_time_ms: f64,
}

impl DetectionResult {
    pub fn new(method_id: MethodId, entries: Vec<DetectionEntry>, warnings: Vec<String>) -> Self {
        let athletes_flagged = entries
            .iter()
            .filter(|e| e.flagged)
            .map(|e| e.performance.athlete_id.clone())
            .collect();
        DetectionResult {
            method_id,
            score_scale: method_id.score_scale().to_string(),
            entries,
            athletes_flagged,
            warnings,
            wall_time_ms: 0.0,
        }
    }

    pub fn flagged_entries(&self) -> impl Iterator<Item = &DetectionEntry> {
        self.entries.iter().filter(|e| e.flagged)
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged_entries().count()
    }

    /// Highest severity among each flagged athlete's flagged performances.
    pub fn athlete_severity(&self) -> BTreeMap<&str, f64> {
        let mut out: BTreeMap<&str, f64> = BTreeMap::new();
        for e in self.flagged_entries() {
            let sev = e.score.map(|s| self.method_id.severity(s)).unwrap_or(f64::NEG_INFINITY);
            out.entry(e.performance.athlete_id.as_str())
                .and_modify(|v| *v = v.max(sev))
                .or_insert(sev);
        }
        out
    }

    /// Flagged athletes ordered by descending severity, ties by athlete id.
    pub fn ranked_athletes(&self) -> Vec<(&str, f64)> {
        let mut ranked: Vec<(&str, f64)> = self.athlete_severity().into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked
    }

    /// Serialized result without the timing measurement; identical across reruns with
    /// the same inputs and seed.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut copy = self.clone();
        copy.wall_time_ms = 0.0;
        serde_json::to_vec(&copy).expect("result serializes")
    }

    /// All athletes that appear in this result.
    pub fn athletes(&self) -> BTreeSet<&str> {
        self.entries
            .iter()
            .map(|e| e.performance.athlete_id.as_str())
            .collect()
    }
}

/// Runs `method` over `histories` with no competition metadata.
pub fn run_detector(
    method: MethodId,
    histories: &[AthleteHistory],
    config: &DetectorConfig,
) -> Result<DetectionResult, DetectError> {
    run_detector_with(method, histories, config, &DetectContext::default())
}

pub fn run_detector_with(
    method: MethodId,
    histories: &[AthleteHistory],
    config: &DetectorConfig,
    ctx: &DetectContext,
) -> Result<DetectionResult, DetectError> {
    config.validate()?;
    let start = Instant::now();
    for h in histories {
        h.validate()?;
    }
    // canonical order makes seeded methods independent of input permutation
    let mut ordered: Vec<&AthleteHistory> = histories.iter().collect();
    ordered.sort_by(|a, b| {
        a.athlete_id
            .cmp(&b.athlete_id)
            .then_with(|| a.event_code.cmp(&b.event_code))
    });

    let mut result = match method {
        MethodId::ZScore | MethodId::Mad | MethodId::Iqr | MethodId::ExcessPerformance => {
            stat::run_rule(method, &ordered, config)
        }
        MethodId::IsolationForest => iforest::run(&ordered, config, ctx),
        MethodId::GbtResidual => gbt::run(&ordered, config, ctx)?,
        MethodId::BayesHier => bayes::run(&ordered, config),
        MethodId::Copula => copula::run(&ordered, config),
    };
    result.wall_time_ms = start.elapsed().as_secs_f64() * 1000.0;
    Ok(result)
}

/// Runs several methods over the same histories.
pub fn run_methods(
    methods: &[MethodId],
    histories: &[AthleteHistory],
    config: &DetectorConfig,
    ctx: &DetectContext,
) -> Result<Vec<DetectionResult>, DetectError> {
    methods
        .par_iter()
        .map(|&m| run_detector_with(m, histories, config, ctx))
        .collect()
}

pub(crate) fn perf_ref(h: &AthleteHistory, index: usize) -> PerformanceRef {
    PerformanceRef {
        athlete_id: h.athlete_id.clone(),
        index: index as u32,
        competition_id: h.performances[index].competition_id.clone(),
    }
}

/// Entries for every performance of `h`, all with the same unscored status.
pub(crate) fn unscored_entries(
    h: &AthleteHistory,
    status: EntryStatus,
    explanation: &str,
) -> Vec<DetectionEntry> {
    (0..h.len())
        .map(|i| DetectionEntry {
            performance: perf_ref(h, i),
            status,
            flagged: false,
            score: None,
            explanation: explanation.to_string(),
        })
        .collect()
}
