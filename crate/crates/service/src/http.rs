//! Routes and the mapping from service errors to status codes.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use taskflow_core::engine::EngineError;
use taskflow_core::taskflow::TaskFlow;

use crate::{AppState, ServiceError};

type Shared = State<Arc<AppState>>;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::UnknownSession(_) | ServiceError::UnknownVersion(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict { .. } | ServiceError::Engine(EngineError::Closed(_)) => StatusCode::CONFLICT,
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::NoCorpus | ServiceError::Config(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = match &self {
            ServiceError::Invalid(issues) => json!({ "error": self.to_string(), "issues": issues }),
            ServiceError::Conflict { current, candidate } => {
                json!({ "error": self.to_string(), "current": current, "candidate": candidate })
            }
            _ => json!({ "error": self.to_string() }),
        };
        (status, Json(body)).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/v1/sessions", post(create_session))
        .route("/api/v1/sessions/{id}", get(get_session))
        .route("/api/v1/sessions/{id}/messages", post(post_message))
        .route("/api/v1/taskflow", get(get_taskflow).put(put_taskflow))
        .route("/api/v1/actions", get(actions))
        .route("/api/v1/pipeline/run", post(run_pipeline))
        .with_state(state)
}

async fn healthz(State(state): Shared) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "taskflow_version": state.store().current_version() }))
}

async fn create_session(State(state): Shared) -> Result<Response, ServiceError> {
    Ok((StatusCode::CREATED, Json(state.create_session()?)).into_response())
}

#[derive(Debug, Deserialize)]
struct MessageBody {
    text: String,
}

async fn post_message(
    State(state): Shared,
    Path(id): Path<String>,
    Json(body): Json<MessageBody>,
) -> Result<Response, ServiceError> {
    Ok(Json(state.post_message(&id, &body.text).await?).into_response())
}

async fn get_session(State(state): Shared, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(state.session(&id).await?).into_response())
}

#[derive(Debug, Deserialize)]
struct VersionQuery {
    version: Option<u64>,
}

async fn get_taskflow(State(state): Shared, Query(q): Query<VersionQuery>) -> Result<Response, ServiceError> {
    let tf = state.taskflow(q.version)?;
    Ok(Json(&*tf).into_response())
}

async fn put_taskflow(State(state): Shared, Json(candidate): Json<TaskFlow>) -> Result<Response, ServiceError> {
    let version = state.publish(candidate)?;
    Ok(Json(json!({ "version": version })).into_response())
}

async fn actions(State(state): Shared) -> Response {
    Json(state.actions()).into_response()
}

async fn run_pipeline(State(state): Shared) -> Result<Response, ServiceError> {
    let worker = Arc::clone(&state);
    let summary = tokio::task::spawn_blocking(move || worker.run_pipeline())
        .await
        .map_err(|e| ServiceError::Artifacts(e.to_string()))??;
    Ok(Json(summary).into_response())
}
