use active_testing::dataset::DatasetError;
use active_testing::engine::EngineError;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown dataset {0}")]
    UnknownDataset(String),
    #[error("{message}")]
    Validation {
        field: Option<String>,
        message: String,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("event log {path}: {message}")]
    Log { path: String, message: String },
    #[error("replaying session {session} failed: {message}")]
    Replay { session: String, message: String },
    #[error("internal error: {0}")]
    Internal(String),
}

/// The JSON body of every error response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ServiceError {
    pub fn validation(message: impl Into<String>) -> Self {
        ServiceError::Validation {
            field: None,
            message: message.into(),
        }
    }

    fn parts(&self) -> (StatusCode, &'static str, Option<String>) {
        match self {
            ServiceError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session", None),
            ServiceError::UnknownDataset(_) => (
                StatusCode::NOT_FOUND,
                "unknown_dataset",
                Some("dataset".into()),
            ),
            ServiceError::Validation { field, .. } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                "validation",
                field.clone(),
            ),
            ServiceError::Engine(EngineError::InvalidConfig { field, .. }) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                "validation",
                Some(field.clone()),
            ),
            ServiceError::Engine(EngineError::NotPending(_)) => {
                (StatusCode::CONFLICT, "not_pending", Some("item_id".into()))
            }
            ServiceError::Engine(EngineError::Conflict { .. }) => {
                (StatusCode::CONFLICT, "conflict", Some("truth".into()))
            }
            ServiceError::Engine(_) => (StatusCode::INTERNAL_SERVER_ERROR, "engine", None),
            ServiceError::Dataset(_) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                "dataset",
                Some("dataset".into()),
            ),
            ServiceError::Log { .. } | ServiceError::Replay { .. } | ServiceError::Internal(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal", None)
            }
        }
    }

    pub fn body(&self) -> ErrorBody {
        let (_, code, field) = self.parts();
        ErrorBody {
            code: code.into(),
            message: self.to_string(),
            field,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, _, _) = self.parts();
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (status, Json(self.body())).into_response()
    }
}
