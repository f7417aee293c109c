//! Report export for the `evaluate` and `export-report` verbs.
//!
//! `export-report` writes `report.json` (evaluation, consensus and per-method run
//! summaries) and `report.txt` (the human table) into the output directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use trackscreen_core::{ConsensusEntry, EvaluationReport, EventSlice, Store};

use crate::error::ApiError;
use crate::views::{consensus_view, evaluation_view, ConsensusQuery};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub method_id: trackscreen_core::MethodId,
    pub config_fingerprint: String,
    pub data_version: u64,
    pub wall_time_ms: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub evaluation: EvaluationReport,
    pub consensus: Vec<ConsensusEntry>,
    pub runs: Vec<MethodRun>,
}

pub fn build_report(store: &Store, slice: &EventSlice) -> Result<Report, ApiError> {
    let evaluation = evaluation_view(store, slice, None)?;
    let consensus = consensus_view(store, slice, &ConsensusQuery::default())?;
    let runs = store
        .materialized_for_slice(slice)?
        .iter()
        .map(|m| MethodRun {
            method_id: m.result.method_id,
            config_fingerprint: m.config_fingerprint.clone(),
            data_version: m.data_version,
            wall_time_ms: m.result.wall_time_ms,
            warnings: m.result.warnings.clone(),
        })
        .collect();
    Ok(Report { evaluation, consensus, runs })
}

pub fn write_report(report: &Report, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(report)?)?;
    fs::write(dir.join("report.txt"), report.evaluation.to_table())?;
    Ok(())
}
