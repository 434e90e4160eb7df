//! HTTP API over the run store, under `/api/v1`, plus the review UI at `/`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use matchforge::store::{DecisionRequest, RunStore};
use matchforge::{Error, RunRequest};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::{ServeDir, ServeFile};

const PLACEHOLDER: &str = "<!doctype html>
<html><head><meta charset=\"utf-8\"><title>matchforge</title></head>
<body>
<h1>matchforge</h1>
<p>The review UI is not bundled with this server. Start it with <code>--ui-dir</code> pointing at a built UI,
or use the JSON API under <code>/api/v1</code>.</p>
</body></html>
";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn validation(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code: "validation",
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            Error::Validation(_)
            | Error::UnresolvedRef(_)
            | Error::Parse { .. }
            | Error::Config(_)
            | Error::Io { .. }
            | Error::TooManyCandidates(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError {
            status,
            code,
            message: e.to_string(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::validation(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::validation(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;
type Store = Arc<RunStore>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> matchforge::Result<T> + Send + 'static,
    T: Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: e.to_string(),
        }),
    }
}

async fn create_run(
    State(store): State<Store>,
    body: Result<Json<RunRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let Json(req) = body?;
    let run_id = blocking(move || store.create_run(req)).await?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "run_id": run_id, "status": "running" }))))
}

async fn list_runs(State(store): State<Store>) -> impl IntoResponse {
    Json(store.list_runs())
}

async fn get_run(State(store): State<Store>, Path(id): Path<String>) -> ApiResult<Response> {
    let record = blocking(move || store.get_run(&id)).await?;
    Ok(Json(record).into_response())
}

#[derive(Debug, Deserialize)]
struct DeferredParams {
    #[serde(default = "default_p")]
    p: u32,
}

fn default_p() -> u32 {
    30
}

async fn list_deferred(
    State(store): State<Store>,
    Path(id): Path<String>,
    params: Result<Query<DeferredParams>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(params) = params?;
    let items = blocking(move || store.list_deferred(&id, params.p)).await?;
    Ok(Json(items).into_response())
}

#[derive(Debug, Deserialize)]
struct DecisionParams {
    #[serde(default)]
    overwrite: bool,
}

async fn submit_decision(
    State(store): State<Store>,
    Path(id): Path<String>,
    params: Result<Query<DecisionParams>, QueryRejection>,
    body: Result<Json<DecisionRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Query(params) = params?;
    let Json(req) = body?;
    let effective = blocking(move || store.submit_decision(&id, req, params.overwrite)).await?;
    Ok(Json(json!({ "ok": true, "effective": effective })).into_response())
}

#[derive(Debug, Deserialize)]
struct MetricsParams {
    #[serde(default)]
    with_decisions: bool,
}

async fn get_metrics(
    State(store): State<Store>,
    Path(id): Path<String>,
    params: Result<Query<MetricsParams>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(params) = params?;
    let report = blocking(move || store.get_metrics(&id, params.with_decisions)).await?;
    Ok(Json(report).into_response())
}

async fn api_not_found() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        code: "not_found",
        message: "no such endpoint".into(),
    }
}

pub fn api(store: Store) -> Router {
    Router::new()
        .route("/runs", get(list_runs).post(create_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/deferred", get(list_deferred))
        .route("/runs/{id}/decisions", axum::routing::post(submit_decision))
        .route("/runs/{id}/metrics", get(get_metrics))
        .fallback(api_not_found)
        .with_state(store)
}

/// The full application: API plus the UI (a placeholder page without `ui_dir`).
pub fn router(store: Store, ui_dir: Option<PathBuf>) -> Router {
    let app = Router::new().nest("/api/v1", api(store));
    match ui_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            app.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)))
        }
        None => app.route("/", get(|| async { Html(PLACEHOLDER) })),
    }
}

pub async fn serve(addr: SocketAddr, data_dir: PathBuf, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    if let Some(dir) = &ui_dir {
        if !dir.is_dir() {
            return Err(std::io::Error::other(format!("ui dir {} is not a directory", dir.display())));
        }
    }
    std::fs::create_dir_all(&data_dir)
        .map_err(|e| std::io::Error::new(e.kind(), format!("data dir {}: {e}", data_dir.display())))?;
    let store = RunStore::open(&data_dir).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| std::io::Error::new(e.kind(), format!("cannot listen on {addr}: {e}")))?;
    let local = listener.local_addr()?;
    tracing::info!("serving {} on http://{local}", data_dir.display());
    println!("listening on http://{local}");
    axum::serve(listener, router(Arc::new(store), ui_dir))
        .with_graceful_shutdown(shutdown_signal())
        .await
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    tracing::info!("shutting down");
}
