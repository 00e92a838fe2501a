use activehar::acquire::AcquisitionFn;
use activehar::metrics::Evaluation;
use activehar::oracle::TaskState;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::state::{AppState, ServiceError};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ServiceError>;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub eta: f64,
    pub function: AcquisitionFn,
    pub user: String,
    /// Defaults to the service seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: u64,
    pub k: usize,
    pub pool_size: usize,
    pub test_size: usize,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelRequest {
    pub task_id: u64,
    pub class_index: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkipRequest {
    pub task_id: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelResponse {
    pub accepted: bool,
    pub remaining: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionStatus {
    pub session_id: u64,
    pub user: String,
    pub function: AcquisitionFn,
    pub eta: f64,
    pub k: usize,
    pub pending: usize,
    pub labeled: usize,
    pub skipped: usize,
    pub model_version: u64,
    pub retraining: bool,
    pub pre: Evaluation,
    pub post: Option<Evaluation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The oracle API, plus the static UI when the state has a directory for it.
pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/classes", get(classes))
        .route("/session", post(create))
        .route("/session/{id}/next", get(next))
        .route("/session/{id}/label", post(label))
        .route("/session/{id}/skip", post(skip))
        .route("/session/{id}/status", get(status));
    let api = match state.static_dir() {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    api.with_state(state)
}

async fn classes(State(state): State<AppState>) -> Json<Vec<String>> {
    Json(state.classes().to_vec())
}

async fn create(
    State(state): State<AppState>,
    Json(req): Json<CreateSession>,
) -> ApiResult<CreatedSession> {
    let st = state.clone();
    let id = tokio::task::spawn_blocking(move || {
        st.create_session(&req.user, req.function, req.eta, req.seed)
    })
    .await
    .map_err(|e| ServiceError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let created = state.with_session(id, |s| CreatedSession {
        session_id: id,
        k: s.k(),
        pool_size: s.pool.len(),
        test_size: s.test.len(),
        classes: s.classes.clone(),
    })?;
    // k = 0 needs no labels and no retrain.
    Ok(Json(created))
}

async fn next(
    State(state): State<AppState>,
    Path(id): Path<u64>,
) -> Result<Response, ServiceError> {
    let task = state.with_session(id, |s| s.next_pending().cloned())?;
    Ok(match task {
        Some(t) => Json(t).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn label(
    State(state): State<AppState>,
    Path(id): Path<u64>,
    Json(req): Json<LabelRequest>,
) -> ApiResult<LabelResponse> {
    let remaining = state.with_session(id, |s| s.label(req.task_id, req.class_index))??;
    resolved(&state, id, remaining)
}

async fn skip(
    State(state): State<AppState>,
    Path(id): Path<u64>,
    Json(req): Json<SkipRequest>,
) -> ApiResult<LabelResponse> {
    let remaining = state.with_session(id, |s| s.skip(req.task_id))??;
    resolved(&state, id, remaining)
}

fn resolved(state: &AppState, id: u64, remaining: usize) -> ApiResult<LabelResponse> {
    if remaining == 0 {
        state.maybe_retrain(id, state.entry(id)?);
    }
    Ok(Json(LabelResponse {
        accepted: true,
        remaining,
    }))
}

async fn status(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult<SessionStatus> {
    let error = state.retrain_error(id);
    let status = state.with_session(id, |s| SessionStatus {
        session_id: id,
        user: s.user.clone(),
        function: s.function,
        eta: s.eta,
        k: s.k(),
        pending: s.count(TaskState::Pending),
        labeled: s.count(TaskState::Labeled),
        skipped: s.count(TaskState::Skipped),
        model_version: s.version,
        retraining: s.is_retraining(),
        pre: s.pre.clone(),
        post: s.post.clone(),
        error,
    })?;
    Ok(Json(status))
}
