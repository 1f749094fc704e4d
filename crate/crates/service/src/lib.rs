//! HTTP service for lakechart recommendation sessions.
//!
//! Routes:
//! - `POST /sessions`: load a lake and open a session
//! - `GET /sessions/{id}/schema`
//! - `GET /sessions/{id}/recommendations?n=&strategy=&prune=&async=`
//! - `POST /sessions/{id}/plans/evaluate`
//!
//! Errors are `{ "code": ..., "message": ... }` bodies.

pub mod error;
pub mod schema;
pub mod state;

use std::collections::HashMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lakechart_core::pipeline::{evaluate_plan, resolve_column, resolve_query_column};
use lakechart_core::plans::AggFn;
use lakechart_core::{EngineConfig, Strategy};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use tokio::net::TcpListener;

pub use error::ApiError;
pub use schema::{schema_doc, SchemaDoc};
pub use state::{AppState, Poll, RunRequest, Session, SessionRequest};

pub const PORT_VAR: &str = "LAKECHART_PORT";
pub const DATA_DIR_VAR: &str = "LAKECHART_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub port: u16,
    pub data_dir: PathBuf,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            data_dir: PathBuf::from("lakechart-data"),
        }
    }
}

impl ServiceConfig {
    /// Reads `LAKECHART_PORT` and `LAKECHART_DATA_DIR`, falling back to the defaults.
    pub fn from_env() -> Result<Self, String> {
        let mut cfg = Self::default();
        if let Ok(p) = std::env::var(PORT_VAR) {
            cfg.port = p
                .parse()
                .map_err(|_| format!("{PORT_VAR}: `{p}` is not a port number"))?;
        }
        if let Ok(d) = std::env::var(DATA_DIR_VAR) {
            cfg.data_dir = d.into();
        }
        Ok(cfg)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/schema", get(get_schema))
        .route("/sessions/{id}/recommendations", get(get_recommendations))
        .route("/sessions/{id}/plans/evaluate", post(evaluate))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such route") })
        .with_state(state)
}

/// Serves until `shutdown` resolves, then flushes the store.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(Arc::clone(&state));
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await?;
    state.flush().await;
    Ok(())
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}

#[derive(Serialize)]
struct SessionDescriptor {
    session_id: String,
    input_key: String,
    config: EngineConfig,
    schema: SchemaDoc,
}

fn descriptor(s: &Session) -> SessionDescriptor {
    SessionDescriptor {
        session_id: s.id.clone(),
        input_key: s.input_key.clone(),
        config: s.config().clone(),
        schema: schema_doc(&s.id, &s.input_key, &s.lake, s.origin, s.config()),
    }
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let request: SessionRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return ApiError::bad_request(format!("invalid session request: {e}")).into_response(),
    };
    match state.create_session(request).await {
        Ok(s) => (StatusCode::CREATED, Json(descriptor(&s))).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn get_schema(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<SchemaDoc>, ApiError> {
    let s = state.session(&id)?;
    Ok(Json(schema_doc(&s.id, &s.input_key, &s.lake, s.origin, s.config())))
}

fn parse_flag(name: &str, v: &str) -> Result<bool, ApiError> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "on" | "true" | "yes" => Ok(true),
        "0" | "off" | "false" | "no" => Ok(false),
        _ => Err(ApiError::bad_request(format!("`{name}` must be on or off, got `{v}`"))),
    }
}

fn run_request(s: &Session, q: &HashMap<String, String>) -> Result<RunRequest, ApiError> {
    let mut run = s.run_defaults();
    if let Some(n) = q.get("n") {
        run.n = n
            .parse()
            .map_err(|_| ApiError::bad_request(format!("`n` must be a count, got `{n}`")))?;
    }
    if let Some(st) = q.get("strategy") {
        run.strategy = st.parse::<Strategy>().map_err(ApiError::bad_request)?;
    }
    if let Some(p) = q.get("prune") {
        run.prune = parse_flag("prune", p)?;
    }
    Ok(run)
}

#[derive(Serialize)]
struct RecommendationsBody<'a> {
    status: &'static str,
    key: &'a str,
    cache_hit: bool,
    timing_ms: f64,
    result: &'a RawValue,
}

#[derive(Serialize)]
struct PendingBody<'a> {
    status: &'static str,
    key: &'a str,
}

fn done(key: &str, payload: &str, cache_hit: bool, started: Instant) -> Response {
    let raw = RawValue::from_string(payload.to_string()).expect("stored payloads are JSON");
    let body = RecommendationsBody {
        status: "done",
        key,
        cache_hit,
        timing_ms: started.elapsed().as_secs_f64() * 1e3,
        result: &raw,
    };
    Json(body).into_response()
}

async fn get_recommendations(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Response {
    let started = Instant::now();
    let result = async {
        let s = state.session(&id)?;
        let run = run_request(&s, &q)?;
        let key = s.result_key(run);
        let background = match q.get("async") {
            Some(v) => parse_flag("async", v)?,
            None => false,
        };
        if background {
            return Ok(match state.poll(&s, run)? {
                Poll::Done(payload, hit) => done(&key, &payload, hit, started),
                Poll::Running => (
                    StatusCode::ACCEPTED,
                    Json(PendingBody {
                        status: "running",
                        key: &key,
                    }),
                )
                    .into_response(),
            });
        }
        let (payload, hit) = state.recommendations(&s, run).await?;
        Ok::<_, ApiError>(done(&key, &payload, hit, started))
    }
    .await;
    result.unwrap_or_else(IntoResponse::into_response)
}

#[derive(Debug, Deserialize)]
struct EvaluateRequest {
    #[serde(rename = "A")]
    a: String,
    #[serde(rename = "M")]
    m: String,
    #[serde(rename = "F")]
    f: String,
    #[serde(default)]
    series: Option<Vec<Vec<String>>>,
}

async fn evaluate(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Response {
    let result = async {
        let s = state.session(&id)?;
        let req: EvaluateRequest = serde_json::from_slice(&body)
            .map_err(|e| ApiError::bad_request(format!("invalid plan request: {e}")))?;
        let invalid = |e| ApiError::engine(e, StatusCode::UNPROCESSABLE_ENTITY);
        let a = resolve_query_column(&s.lake, &req.a).map_err(invalid)?;
        let m = resolve_column(&s.lake, &req.m).map_err(invalid)?;
        let f: AggFn = serde_json::from_value(serde_json::Value::String(req.f.to_ascii_uppercase()))
            .map_err(|_| {
                invalid(lakechart_core::Error::InvalidPlan(format!(
                    "unknown aggregate `{}`",
                    req.f
                )))
            })?;
        let groups = req
            .series
            .map(|groups| {
                groups
                    .iter()
                    .map(|g| g.iter().map(|k| resolve_column(&s.lake, k)).collect())
                    .collect::<lakechart_core::Result<Vec<Vec<_>>>>()
            })
            .transpose()
            .map_err(invalid)?;
        let session = Arc::clone(&s);
        let out = tokio::task::spawn_blocking(move || {
            let prep = session.prepared(session.config().strategy);
            evaluate_plan(&prep, a, m, f, groups)
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(invalid)?;
        Ok::<_, ApiError>(Json(out).into_response())
    }
    .await;
    result.unwrap_or_else(IntoResponse::into_response)
}
