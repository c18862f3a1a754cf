//! HTTP service over the validation store.
//!
//! | method | path                        | body / query                 |
//! |--------|-----------------------------|------------------------------|
//! | GET    | `/health`                   |                              |
//! | GET    | `/validation/next`          | `?validator=ID`              |
//! | POST   | `/validation/{row}/vote`    | `{"validator", "choice"}`    |
//! | GET    | `/validation/stats`         |                              |
//! | POST   | `/match-jobs`               | a [`PipelineJob`]            |
//! | GET    | `/rows/{id}`                |                              |
//!
//! The validator id may also come from the `x-validator-id` header. Errors are
//! `{"error": kind, "detail": message}`.

use std::future::Future;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::config::AppConfig;
use crate::error::{Error, Result};
use crate::hitl::{Choice, DurableStore, OfferSnapshot, RowStatus, StoreStats, ValidationRow};
use crate::pipeline::{run_pipeline_with, PipelineJob, RunReport, HITL_DIR};

pub const VALIDATOR_HEADER: &str = "x-validator-id";

pub struct AppState {
    config: AppConfig,
    store: Mutex<DurableStore>,
}

impl AppState {
    /// Replays the event log under the configured data directory.
    pub fn open(config: AppConfig) -> Result<Arc<Self>> {
        config.validate()?;
        let store = DurableStore::open(
            &config.data_dir.join(HITL_DIR),
            config.judgments,
            config.aggregation,
        )?;
        Ok(Arc::new(AppState {
            config,
            store: Mutex::new(store),
        }))
    }

    pub fn config(&self) -> &AppConfig {
        &self.config
    }

    pub fn store(&self) -> MutexGuard<'_, DurableStore> {
        // A panic while holding the lock cannot leave the store half-applied:
        // events are applied only after they are logged.
        self.store.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Flushes the log and writes a snapshot.
    pub fn shutdown(&self) -> Result<()> {
        let store = self.store();
        store.flush()?;
        store.compact()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    detail: String,
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}

impl ApiError {
    fn bad_request(detail: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            kind: "bad-request",
            detail: detail.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let root = match &e {
            Error::Stage { source, .. } => source.as_ref(),
            other => other,
        };
        let (status, kind) = match root {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not-found"),
            Error::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            Error::Domain { .. } | Error::Config(_) | Error::Parse { .. } => {
                (StatusCode::BAD_REQUEST, "invalid")
            }
            Error::UndefinedMetric(_) | Error::NoPositivePairs => {
                (StatusCode::UNPROCESSABLE_ENTITY, "undefined")
            }
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                (StatusCode::NOT_FOUND, "not-found")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError {
            status,
            kind,
            detail: e.to_string(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.kind.to_string(),
            detail: self.detail,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub rows: usize,
}

/// What a validator sees: no ground truth and no other votes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowView {
    pub row_id: u64,
    pub query: OfferSnapshot,
    pub candidates: Vec<OfferSnapshot>,
    pub votes_cast: usize,
    pub judgments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextRow {
    /// `None` when nothing is left for this validator.
    pub row: Option<RowView>,
    pub pending: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRequest {
    #[serde(default)]
    pub validator: Option<String>,
    pub choice: Choice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResponse {
    pub row_id: u64,
    pub status: RowStatus,
    pub votes_cast: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Choice>,
}

impl VoteResponse {
    pub fn of(row: &ValidationRow) -> Self {
        VoteResponse {
            row_id: row.row_id,
            status: row.status,
            votes_cast: row.votes.len(),
            verdict: row.verdict,
        }
    }
}

#[derive(Deserialize)]
struct ValidatorQuery {
    validator: Option<String>,
}

fn validator_id(explicit: Option<String>, headers: &HeaderMap) -> std::result::Result<String, ApiError> {
    explicit
        .or_else(|| {
            headers
                .get(VALIDATOR_HEADER)
                .and_then(|v| v.to_str().ok())
                .map(str::to_string)
        })
        .filter(|v| !v.trim().is_empty())
        .ok_or_else(|| ApiError::bad_request(format!("missing validator id (query `validator` or header {VALIDATOR_HEADER})")))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        rows: state.store().store().len(),
    })
}

async fn next_row(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    query: std::result::Result<Query<ValidatorQuery>, QueryRejection>,
) -> ApiResult<NextRow> {
    let Query(q) = query?;
    let validator = validator_id(q.validator, &headers)?;
    let guard = state.store();
    let store = guard.store();
    let row = store.next_for(&validator).map(|r| RowView {
        row_id: r.row_id,
        query: r.query.clone(),
        candidates: r.candidates.clone(),
        votes_cast: r.votes.len(),
        judgments: store.judgments(),
    });
    let pending = store.rows().filter(|r| r.status == RowStatus::Pending).count();
    Ok(Json(NextRow { row, pending }))
}

async fn vote(
    State(state): State<Arc<AppState>>,
    UrlPath(row_id): UrlPath<u64>,
    headers: HeaderMap,
    body: std::result::Result<Json<VoteRequest>, JsonRejection>,
) -> ApiResult<VoteResponse> {
    let Json(req) = body?;
    let validator = validator_id(req.validator, &headers)?;
    let row = state.store().record_vote(row_id, &validator, req.choice)?;
    Ok(Json(VoteResponse::of(&row)))
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<StoreStats> {
    let guard = state.store();
    Json(guard.store().stats(state.config.p_model, state.config.seed))
}

async fn get_row(
    State(state): State<Arc<AppState>>,
    UrlPath(row_id): UrlPath<u64>,
) -> ApiResult<ValidationRow> {
    let guard = state.store();
    guard
        .store()
        .row(row_id)
        .cloned()
        .map(Json)
        .ok_or_else(|| Error::NotFound(format!("row {row_id}")).into())
}

/// Job paths are relative to the data directory and may not leave it.
fn confine(data_dir: &Path, p: &Path) -> std::result::Result<PathBuf, ApiError> {
    let escapes = p
        .components()
        .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir));
    if escapes {
        return Err(ApiError::bad_request(format!(
            "path {} must be relative to the data directory without `..`",
            p.display()
        )));
    }
    Ok(data_dir.join(p))
}

async fn match_job(
    State(state): State<Arc<AppState>>,
    body: std::result::Result<Json<PipelineJob>, JsonRejection>,
) -> std::result::Result<(StatusCode, Json<RunReport>), ApiError> {
    let Json(mut job) = body?;
    let data = &state.config.data_dir;
    job.index_corpus = confine(data, &job.index_corpus)?;
    job.query_corpus = confine(data, &job.query_corpus)?;
    job.head = confine(data, &job.head)?;
    let state2 = Arc::clone(&state);
    let report = tokio::task::spawn_blocking(move || {
        let cfg = &state2.config;
        run_pipeline_with(cfg, &job, |preds, catalog, truth| {
            let mut store = state2.store();
            let r = store.enqueue_predictions(preds, &cfg.routing, catalog, truth)?;
            store.flush()?;
            Ok(r)
        })
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        kind: "internal",
        detail: e.to_string(),
    })??;
    Ok((StatusCode::CREATED, Json(report)))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/validation/next", get(next_row))
        .route("/validation/{row}/vote", post(vote))
        .route("/validation/stats", get(stats))
        .route("/match-jobs", post(match_job))
        .route("/rows/{id}", get(get_row))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then flushes the log and snapshots.
pub async fn serve(state: Arc<AppState>, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(&state.config.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(Arc::clone(&state)))
        .with_graceful_shutdown(shutdown)
        .await?;
    state.shutdown()
}
