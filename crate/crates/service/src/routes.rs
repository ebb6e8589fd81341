use active_testing::dataset::ItemId;
use active_testing::engine::SubmitOutcome;
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::{AppState, BatchPayload, CreateSession, EstimateSnapshot, ServiceError, SessionEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: Uuid,
    pub estimate: EstimateSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitVet {
    pub item_id: ItemId,
    pub truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub outcome: SubmitOutcome,
    pub estimate: EstimateSnapshot,
}

#[derive(Debug, Serialize)]
struct History {
    session_id: Uuid,
    events: Vec<SessionEvent>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/datasets", get(datasets))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/batch", get(batch))
        .route("/sessions/{id}/vets", post(submit))
        .route("/sessions/{id}/estimate", get(estimate))
        .route("/sessions/{id}/history", get(history))
        .with_state(state)
}

/// Bodies are parsed by hand so that malformed JSON gets the same error
/// shape as everything else.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body)
        .map_err(|e| ServiceError::validation(format!("invalid request body: {e}")))
}

/// Runs session work off the async workers; refits can take a while.
async fn blocking<R: Send + 'static>(
    f: impl FnOnce() -> Result<R, ServiceError> + Send + 'static,
) -> Result<R, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "sessions": state.n_sessions() }))
}

async fn datasets(State(state): State<AppState>) -> Json<Vec<String>> {
    Json(state.catalog().names().map(str::to_owned).collect())
}

async fn create_session(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<(StatusCode, Json<CreateSessionResponse>), ServiceError> {
    let request: CreateSession = parse(&body)?;
    let estimate = blocking(move || state.create_session(&request)).await?;
    Ok((
        StatusCode::CREATED,
        Json(CreateSessionResponse {
            session_id: estimate.session_id,
            estimate,
        }),
    ))
}

async fn batch(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<BatchPayload>, ServiceError> {
    blocking(move || state.write(&id, |s| s.batch()))
        .await
        .map(Json)
}

async fn submit(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SubmitResponse>, ServiceError> {
    let vet: SubmitVet = parse(&body)?;
    blocking(move || {
        state.write(&id, |s| {
            let outcome = s.submit(&vet.item_id, vet.truth)?;
            Ok(SubmitResponse {
                outcome,
                estimate: s.estimate(),
            })
        })
    })
    .await
    .map(Json)
}

async fn estimate(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<EstimateSnapshot>, ServiceError> {
    state.read(&id, |s| s.estimate()).map(Json)
}

async fn history(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<History>, ServiceError> {
    state
        .read(&id, |s| History {
            session_id: s.id(),
            events: s.history().to_vec(),
        })
        .map(Json)
}
