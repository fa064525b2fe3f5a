//! JSON API.
//!
//! | route | success | errors |
//! |---|---|---|
//! | `GET /studies` | 200 list | |
//! | `GET /studies/{id}/next?participant=P` | 200 task | 400, 404, 410 when done |
//! | `POST /studies/{id}/judgments` | 201 ack | 400, 404, 409 duplicate |
//! | `GET /studies/{id}/export?format=json\|csv\|jsonl` | 200 | 400, 404 |
//! | `GET /images/{file}` | 200 bytes | 400, 404 |
//!
//! Errors carry `{"error": code, "message": text}`.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::service::{JudgmentSubmission, StudyService};
use crate::ServiceError;

#[derive(Clone)]
struct AppState {
    service: Arc<StudyService>,
    images_dir: Option<Arc<PathBuf>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

pub struct ApiError(StatusCode, &'static str, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.1.to_string(),
            message: self.2,
        };
        (self.0, Json(body)).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let (status, code) = match &e {
            ServiceError::UnknownStudy(_) => (StatusCode::NOT_FOUND, "unknown_study"),
            ServiceError::UnknownTask(_) => (StatusCode::NOT_FOUND, "unknown_task"),
            ServiceError::StudyComplete => (StatusCode::GONE, "study_complete"),
            ServiceError::InvalidSelection(_) => (StatusCode::BAD_REQUEST, "invalid_selection"),
            ServiceError::DuplicateSubmission => (StatusCode::CONFLICT, "duplicate_submission"),
            ServiceError::InvalidParticipant => (StatusCode::BAD_REQUEST, "invalid_participant"),
            ServiceError::Config(_) | ServiceError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError(status, code, e.to_string())
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, "bad_request", msg.into())
}

/// Runs a service call off the async workers; writes block on fsync.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())),
    }
}

pub fn router(service: Arc<StudyService>, images_dir: Option<PathBuf>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/studies", get(list_studies))
        .route("/studies/{id}/next", get(next_task))
        .route("/studies/{id}/judgments", post(submit))
        .route("/studies/{id}/export", get(export))
        .route("/images/{file}", get(image))
        .with_state(AppState {
            service,
            images_dir: images_dir.map(Arc::new),
        })
}

async fn list_studies(State(s): State<AppState>) -> Response {
    Json(s.service.summaries()).into_response()
}

#[derive(Deserialize)]
struct NextQuery {
    participant: Option<String>,
}

async fn next_task(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<NextQuery>,
) -> Result<Response, ApiError> {
    let participant = q.participant.ok_or_else(|| bad_request("missing participant query parameter"))?;
    let task = blocking(move || s.service.next_task(&id, &participant)).await?;
    Ok(Json(task).into_response())
}

async fn submit(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<JudgmentSubmission>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(sub) = body.map_err(|e| bad_request(e.body_text()))?;
    let ack = blocking(move || s.service.submit_judgment(&id, sub)).await?;
    Ok((StatusCode::CREATED, Json(ack)).into_response())
}

#[derive(Deserialize)]
struct ExportQuery {
    format: Option<String>,
}

async fn export(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ExportQuery>,
) -> Result<Response, ApiError> {
    let format = q.format.unwrap_or_else(|| "json".into());
    if !matches!(format.as_str(), "json" | "csv" | "jsonl") {
        return Err(bad_request(format!("unknown export format {format}")));
    }
    let exp = blocking(move || s.service.export(&id)).await?;
    Ok(match format.as_str() {
        "csv" => ([(header::CONTENT_TYPE, "text/csv")], exp.to_csv()).into_response(),
        "jsonl" => ([(header::CONTENT_TYPE, "application/x-ndjson")], exp.to_jsonl()).into_response(),
        _ => Json(exp).into_response(),
    })
}

fn content_type(file: &str) -> &'static str {
    let ext = file.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase()).unwrap_or_default();
    match ext.as_str() {
        "jpg" | "jpeg" => "image/jpeg",
        "png" => "image/png",
        "gif" => "image/gif",
        "webp" => "image/webp",
        _ => "application/octet-stream",
    }
}

async fn image(State(s): State<AppState>, Path(file): Path<String>) -> Result<Response, ApiError> {
    let not_found = || ApiError(StatusCode::NOT_FOUND, "not_found", "no such image".into());
    let dir = s.images_dir.ok_or_else(not_found)?;
    if file.is_empty() || file.starts_with('.') || file.contains(['/', '\\', '\0']) {
        return Err(bad_request("invalid image name"));
    }
    match tokio::fs::read(dir.join(&file)).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, content_type(&file))], bytes).into_response()),
        Err(_) => Err(not_found()),
    }
}

/// Serves the API on an already-bound listener until the process exits.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app).await
}
