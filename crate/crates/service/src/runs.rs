//! Detection runs: request resolution, per-(slice, method) coalescing and the in-memory
//! registry behind `POST /api/detect` and `GET /api/runs/{id}`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use trackscreen_core::detect::run_detector_with;
use trackscreen_core::{DetectorConfig, EventSlice, MethodId, Store};

use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectRequest {
    pub slice: String,
    /// Empty runs every method.
    #[serde(default)]
    pub method_ids: Vec<MethodId>,
    /// Overrides of individual detector settings.
    #[serde(default)]
    pub config: Map<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method_id: MethodId,
    pub flagged_athletes: usize,
    pub flagged_performances: usize,
    pub wall_time_ms: f64,
    /// True when an identical earlier run was reused.
    pub reused: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    pub slice: String,
    pub method_ids: Vec<MethodId>,
    pub config_fingerprint: String,
    pub status: RunStatus,
    pub methods: Vec<MethodSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Applies whitelisted overrides to `base`; unknown keys and invalid values are rejected.
pub fn resolve_config(base: &DetectorConfig, overrides: &Map<String, Value>) -> Result<DetectorConfig, ApiError> {
    let mut merged = match serde_json::to_value(base) {
        Ok(Value::Object(m)) => m,
        _ => return Err(ApiError::internal("config does not serialize to an object")),
    };
    for (k, v) in overrides {
        merged.insert(k.clone(), v.clone());
    }
    let cfg: DetectorConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| ApiError::invalid(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn normalize_methods(methods: &[MethodId]) -> Vec<MethodId> {
    if methods.is_empty() {
        return MethodId::ALL.to_vec();
    }
    let mut out = methods.to_vec();
    out.sort();
    out.dedup();
    out
}

/// Stable id for a run request against the current data.
pub fn run_id(slice: &EventSlice, methods: &[MethodId], config: &DetectorConfig, data_version: u64) -> String {
    let mut h = Sha256::new();
    h.update(slice.to_string().as_bytes());
    for m in methods {
        h.update(b"|");
        h.update(m.as_str().as_bytes());
    }
    h.update(b"|");
    h.update(config.fingerprint().as_bytes());
    h.update(data_version.to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// One lock per (slice, method): a second run of the same pair waits and then reuses
/// the first run's stored result.
#[derive(Default)]
pub struct MethodLocks {
    locks: Mutex<HashMap<(String, MethodId), Arc<Mutex<()>>>>,
}

impl MethodLocks {
    fn get(&self, slice: &str, method: MethodId) -> Arc<Mutex<()>> {
        Arc::clone(lock(&self.locks).entry((slice.to_string(), method)).or_default())
    }
}

/// Runs `methods` over `slice` and stores the results, skipping methods whose stored
/// result already matches this config and the current data.
pub fn materialize_methods(
    store: &Store,
    slice: &EventSlice,
    methods: &[MethodId],
    config: &DetectorConfig,
    locks: &MethodLocks,
) -> Result<Vec<MethodSummary>, ApiError> {
    let key = slice.to_string();
    let fingerprint = config.fingerprint();
    let mut histories = None;
    let mut ctx = None;
    let mut out = Vec::new();
    for &method in methods {
        let guard = locks.get(&key, method);
        let _held = lock(&guard);
        let data_version = store.data_version()?;
        if let Some(existing) = store.materialized(slice, method)? {
            if existing.config_fingerprint == fingerprint && existing.data_version == data_version {
                out.push(summary(&existing.result, true));
                continue;
            }
        }
        if histories.is_none() {
            histories = Some(store.query_slice(slice)?);
            ctx = Some(store.detect_context(slice)?);
        }
        let start = Instant::now();
        let result = run_detector_with(
            method,
            histories.as_deref().unwrap_or_default(),
            config,
            ctx.as_ref().expect("set with histories"),
        )?;
        store.materialize(slice, config, &result)?;
        tracing::info!(slice = %key, method = %method, elapsed_ms = start.elapsed().as_millis() as u64, "materialized");
        out.push(summary(&result, false));
    }
    Ok(out)
}

fn summary(r: &trackscreen_core::DetectionResult, reused: bool) -> MethodSummary {
    MethodSummary {
        method_id: r.method_id,
        flagged_athletes: r.athletes_flagged.len(),
        flagged_performances: r.flagged_count(),
        wall_time_ms: r.wall_time_ms,
        reused,
        warnings: r.warnings.clone(),
    }
}

#[derive(Default)]
pub struct RunRegistry {
    runs: Mutex<HashMap<String, RunInfo>>,
    locks: Arc<MethodLocks>,
}

impl RunRegistry {
    pub fn get(&self, run_id: &str) -> Option<RunInfo> {
        lock(&self.runs).get(run_id).cloned()
    }

    pub fn locks(&self) -> Arc<MethodLocks> {
        Arc::clone(&self.locks)
    }

    /// Validates the request and starts the run on the blocking pool. An identical
    /// request against unchanged data returns the existing run unless it failed.
    pub fn submit(
        self: &Arc<Self>,
        store: Arc<Store>,
        req: &DetectRequest,
        base: &DetectorConfig,
    ) -> Result<RunInfo, ApiError> {
        let slice: EventSlice = req.slice.parse().map_err(|e| ApiError::invalid(format!("{e}")))?;
        let config = resolve_config(base, &req.config)?;
        if !store.slice_exists(&slice)? {
            return Err(ApiError::not_found("unknown_slice", format!("slice {slice} has no performances")));
        }
        let methods = normalize_methods(&req.method_ids);
        let id = run_id(&slice, &methods, &config, store.data_version()?);
        let info = {
            let mut runs = lock(&self.runs);
            if let Some(existing) = runs.get(&id) {
                if existing.status != RunStatus::Failed {
                    return Ok(existing.clone());
                }
            }
            let info = RunInfo {
                run_id: id.clone(),
                slice: slice.to_string(),
                method_ids: methods.clone(),
                config_fingerprint: config.fingerprint(),
                status: RunStatus::Queued,
                methods: Vec::new(),
                error: None,
            };
            runs.insert(id.clone(), info.clone());
            info
        };
        let registry = Arc::clone(self);
        tokio::task::spawn_blocking(move || {
            registry.set(&id, |r| r.status = RunStatus::Running);
            let outcome = materialize_methods(&store, &slice, &methods, &config, &registry.locks);
            registry.set(&id, |r| match outcome {
                Ok(methods) => {
                    r.methods = methods;
                    r.status = RunStatus::Done;
                }
                Err(e) => {
                    r.error = Some(e.body.message.clone());
                    r.status = RunStatus::Failed;
                }
            });
        });
        Ok(info)
    }

    fn set(&self, id: &str, f: impl FnOnce(&mut RunInfo)) {
        if let Some(r) = lock(&self.runs).get_mut(id) {
            f(r);
        }
    }
}
