//! Local HTTP API consumed by the browser UI.

use std::collections::HashSet;
use std::convert::Infallible;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::StreamExt;
use serde::Deserialize;
use serde_json::json;

use sciunit_core::container::Sciunit;
use sciunit_core::reuse::{repeat, Backend, RepeatOptions};
use sciunit_core::Error;

use crate::views::{executions_json, graph_json, plan_json, GraphView};

const FALLBACK_INDEX: &str = include_str!("index.html");

pub struct ApiState {
    pub root: PathBuf,
    pub name: String,
    pub backend: Backend,
    /// Directory of a built UI bundle; a minimal page is served otherwise.
    pub static_dir: Option<PathBuf>,
    running: Mutex<HashSet<String>>,
}

impl ApiState {
    pub fn new(root: PathBuf, name: String, backend: Backend, static_dir: Option<PathBuf>) -> Self {
        ApiState {
            root,
            name,
            backend,
            static_dir,
            running: Mutex::new(HashSet::new()),
        }
    }

    fn open(&self) -> Result<Sciunit, ApiError> {
        Ok(Sciunit::open(&self.root, &self.name)?)
    }
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::NotFound(_) => StatusCode::NOT_FOUND,
        Error::InvalidArgument(_) | Error::Parse { .. } | Error::Config(_) => StatusCode::BAD_REQUEST,
        Error::Busy(_) => StatusCode::CONFLICT,
        Error::BackendUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        Error::PlanIncomplete { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

pub fn error_body(e: &Error) -> serde_json::Value {
    json!({ "error": { "kind": e.kind(), "message": e.to_string() } })
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (status_for(&self.0), Json(error_body(&self.0))).into_response()
    }
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(Error::Internal(format!("worker failed: {e}"))))?
}

pub fn router(state: Arc<ApiState>) -> Router {
    Router::new()
        .route("/api/executions", get(executions))
        .route("/api/graph/{id}", get(graph))
        .route("/api/expand", post(expand))
        .route("/api/plan", post(plan))
        .route("/api/repeat", post(repeat_stream))
        .fallback(get(static_files))
        .with_state(state)
}

async fn executions(State(st): State<Arc<ApiState>>) -> Result<Response, ApiError> {
    let bytes = blocking(move || Ok(executions_json(&st.open()?)?)).await?;
    Ok(json_bytes(bytes))
}

#[derive(Debug, Deserialize)]
struct GraphQuery {
    #[serde(default)]
    view: GraphView,
    /// Comma-separated ids to expand, in order.
    #[serde(default)]
    expanded: Option<String>,
}

async fn graph(
    State(st): State<Arc<ApiState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<GraphQuery>,
) -> Result<Response, ApiError> {
    let expanded: Vec<String> = q
        .expanded
        .map(|s| s.split(',').filter(|x| !x.is_empty()).map(str::to_string).collect())
        .unwrap_or_default();
    let bytes = blocking(move || Ok(graph_json(&st.open()?, &id, q.view, &expanded)?)).await?;
    Ok(json_bytes(bytes))
}

#[derive(Debug, Deserialize)]
struct ExpandRequest {
    id: String,
    node_id: String,
    /// Ids already expanded by the client, in order.
    #[serde(default)]
    expanded: Vec<String>,
}

async fn expand(State(st): State<Arc<ApiState>>, Json(req): Json<ExpandRequest>) -> Result<Response, ApiError> {
    let bytes = blocking(move || {
        let mut expanded = req.expanded;
        expanded.push(req.node_id);
        Ok(graph_json(&st.open()?, &req.id, GraphView::Summary, &expanded)?)
    })
    .await?;
    Ok(json_bytes(bytes))
}

#[derive(Debug, Deserialize)]
struct PlanRequest {
    id: String,
    selected: Vec<String>,
}

async fn plan(State(st): State<Arc<ApiState>>, Json(req): Json<PlanRequest>) -> Result<Response, ApiError> {
    let bytes = blocking(move || Ok(plan_json(&st.open()?, &req.id, &req.selected)?)).await?;
    Ok(json_bytes(bytes))
}

#[derive(Debug, Deserialize)]
struct RepeatRequest {
    id: String,
    #[serde(default)]
    selected: Option<Vec<String>>,
    #[serde(default)]
    backend: Option<Backend>,
}

struct RunningGuard {
    state: Arc<ApiState>,
    id: String,
}

impl Drop for RunningGuard {
    fn drop(&mut self) {
        if let Ok(mut running) = self.state.running.lock() {
            running.remove(&self.id);
        }
    }
}

fn line(value: serde_json::Value) -> Result<Bytes, Infallible> {
    let mut bytes = serde_json::to_vec(&value).unwrap_or_default();
    bytes.push(b'\n');
    Ok(Bytes::from(bytes))
}

/// Streams NDJSON: a `started` event, then a `report` or `error` event.
async fn repeat_stream(State(st): State<Arc<ApiState>>, Json(req): Json<RepeatRequest>) -> Result<Response, ApiError> {
    let probe = st.clone();
    let reference = req.id.clone();
    let id = blocking(move || Ok(probe.open()?.resolve(&reference)?)).await?;
    {
        let mut running = st.running.lock().map_err(|_| ApiError(Error::Internal("poisoned lock".into())))?;
        if !running.insert(id.clone()) {
            return Err(ApiError(Error::Busy(format!("a repeat of {id} is already running"))));
        }
    }
    let guard = RunningGuard {
        state: st.clone(),
        id: id.clone(),
    };
    let opts = RepeatOptions {
        backend: req.backend.unwrap_or(st.backend),
        selected: req.selected.clone(),
        quiet: true,
        ..Default::default()
    };
    let worker_state = st.clone();
    let worker_id = id.clone();
    let handle = tokio::task::spawn_blocking(move || {
        let _guard = guard;
        let sciunit = worker_state.open().map_err(|e| e.0)?;
        repeat(&sciunit, &worker_id, &opts)
    });
    let started = json!({ "event": "started", "execution_id": id, "selected": req.selected });
    let finished = async move {
        match handle.await {
            Ok(Ok(report)) => line(json!({ "event": "report", "report": report })),
            Ok(Err(e)) => line(json!({ "event": "error", "error": error_body(&e)["error"] })),
            Err(e) => line(json!({ "event": "error", "error": { "kind": "internal-error", "message": e.to_string() } })),
        }
    };
    let stream = futures::stream::once(async move { line(started) }).chain(futures::stream::once(finished));
    Response::builder()
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .body(Body::from_stream(stream))
        .map_err(|e| ApiError(Error::Internal(e.to_string())))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("ico") => "image/x-icon",
        Some("woff2") => "font/woff2",
        _ => "application/octet-stream",
    }
}

async fn static_files(State(st): State<Arc<ApiState>>, uri: Uri) -> Response {
    let rel = uri.path().trim_start_matches('/');
    if rel.starts_with("api/") {
        return ApiError(Error::NotFound(format!("endpoint {}", uri.path()))).into_response();
    }
    let Some(dir) = &st.static_dir else {
        return ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], FALLBACK_INDEX).into_response();
    };
    let rel = Path::new(if rel.is_empty() { "index.html" } else { rel });
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return StatusCode::BAD_REQUEST.into_response();
    }
    let mut path = dir.join(rel);
    if !path.is_file() {
        // Client-side routes fall back to the application shell.
        path = dir.join("index.html");
    }
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}
