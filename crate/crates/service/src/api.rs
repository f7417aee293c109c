//! HTTP routes. Every error is a JSON `{code, message, hint}` body; every response carries
//! a `server-timing` header with the handler time.

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tower_http::services::ServeDir;
use trackscreen_core::evaluate::PAGE_SIZE;
use trackscreen_core::{list_methods, DetectorConfig, EventSlice, MethodId, Store};

use crate::error::ApiError;
use crate::runs::{DetectRequest, RunRegistry};
use crate::views::{case_review, consensus_view, evaluation_view, ConsensusQuery};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub runs: Arc<RunRegistry>,
    /// Defaults every run starts from before request overrides.
    pub base_config: DetectorConfig,
}

impl AppState {
    pub fn new(store: Arc<Store>, seed: u64) -> AppState {
        AppState {
            store,
            runs: Arc::new(RunRegistry::default()),
            base_config: DetectorConfig { seed, ..DetectorConfig::default() },
        }
    }
}

type Params = Query<HashMap<String, String>>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn required<'a>(q: &'a HashMap<String, String>, key: &str) -> Result<&'a str, ApiError> {
    q.get(key)
        .map(String::as_str)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| ApiError::invalid(format!("missing query parameter {key:?}")))
}

fn parse_slice(q: &HashMap<String, String>) -> Result<EventSlice, ApiError> {
    required(q, "slice")?.parse().map_err(|e| ApiError::invalid(format!("{e}")))
}

fn parse_method(s: &str) -> Result<MethodId, ApiError> {
    s.trim().parse().map_err(|_| ApiError::invalid(format!("unknown method {s:?}")))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, ApiError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| ApiError::invalid(format!("bad {what} {p:?}"))))
        .collect()
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))], Body::from(bytes)).into_response()
}

async fn methods() -> Response {
    Json(list_methods()).into_response()
}

async fn slices(State(s): State<AppState>) -> Result<Response, ApiError> {
    let store = Arc::clone(&s.store);
    let list = blocking(move || Ok(store.list_slices()?)).await?;
    Ok(Json(list).into_response())
}

async fn detect(State(s): State<AppState>, body: Result<Json<DetectRequest>, JsonRejection>) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::invalid(e.body_text()))?;
    let (store, runs, base) = (Arc::clone(&s.store), Arc::clone(&s.runs), s.base_config.clone());
    let info = blocking(move || runs.submit(store, &req, &base)).await?;
    Ok((StatusCode::ACCEPTED, Json(info)).into_response())
}

async fn run_status(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let info = s.runs.get(&id).ok_or_else(|| ApiError::not_found("unknown_run", format!("no run {id}")))?;
    Ok(Json(info).into_response())
}

async fn screen(State(s): State<AppState>, Query(q): Params) -> Result<Response, ApiError> {
    let slice = parse_slice(&q)?;
    let method = parse_method(required(&q, "method")?)?;
    let cursor = q.get("cursor").cloned();
    let page_size = match q.get("page_size") {
        Some(p) => p.parse::<usize>().map_err(|_| ApiError::invalid("page_size must be a positive integer"))?,
        None => PAGE_SIZE,
    };
    if page_size == 0 || page_size > PAGE_SIZE {
        return Err(ApiError::invalid(format!("page_size must lie in 1..={PAGE_SIZE}")));
    }
    let store = Arc::clone(&s.store);
    let bytes = blocking(move || Ok(store.cached_screen(&slice, method, cursor.as_deref(), page_size)?)).await?;
    Ok(json_bytes(bytes.as_ref().clone()))
}

async fn athlete(State(s): State<AppState>, Path(id): Path<String>, Query(q): Params) -> Result<Response, ApiError> {
    let slice = parse_slice(&q)?;
    let store = Arc::clone(&s.store);
    let view = blocking(move || {
        if !store.athlete_exists(&id)? {
            return Err(ApiError::not_found("unknown_athlete", format!("no athlete {id}")));
        }
        case_review(&store, &slice, &id)
    })
    .await?;
    Ok(Json(view).into_response())
}

async fn consensus(State(s): State<AppState>, Query(q): Params) -> Result<Response, ApiError> {
    let slice = parse_slice(&q)?;
    let query = ConsensusQuery {
        min_methods: q
            .get("min_methods")
            .map(|v| v.parse().map_err(|_| ApiError::invalid("min_methods must be a positive integer")))
            .transpose()?,
        sanctioned: q
            .get("sanctioned")
            .map(|v| v.parse().map_err(|_| ApiError::invalid("sanctioned must be true or false")))
            .transpose()?,
        methods: q
            .get("methods")
            .map(|v| parse_list::<MethodId>(v, "method").map(|m| m.into_iter().collect::<BTreeSet<_>>()))
            .transpose()?,
    };
    let store = Arc::clone(&s.store);
    let entries = blocking(move || consensus_view(&store, &slice, &query)).await?;
    Ok(Json(entries).into_response())
}

async fn evaluate(State(s): State<AppState>, Query(q): Params) -> Result<Response, ApiError> {
    let slice = parse_slice(&q)?;
    let ks = q.get("k").map(|v| parse_list::<usize>(v, "k")).transpose()?;
    let store = Arc::clone(&s.store);
    let report = blocking(move || evaluation_view(&store, &slice, ks.as_deref())).await?;
    Ok(Json(report).into_response())
}

async fn api_not_found() -> ApiError {
    ApiError::not_found("unknown_route", "no such endpoint")
}

async fn server_timing(req: Request, next: Next) -> Response {
    let start = Instant::now();
    let mut res = next.run(req).await;
    let ms = start.elapsed().as_secs_f64() * 1000.0;
    if let Ok(v) = HeaderValue::from_str(&format!("app;dur={ms:.3}")) {
        res.headers_mut().insert("server-timing", v);
    }
    res
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/methods", get(methods))
        .route("/slices", get(slices))
        .route("/detect", post(detect))
        .route("/runs/:id", get(run_status))
        .route("/screen", get(screen))
        .route("/athletes/:id", get(athlete))
        .route("/consensus", get(consensus))
        .route("/evaluate", get(evaluate))
        .fallback(api_not_found);
    let mut app = Router::new().nest("/api", api);
    if let Some(dir) = static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    app.layer(middleware::from_fn(server_timing)).with_state(state)
}
