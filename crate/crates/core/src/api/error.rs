use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::job::JobError;
use crate::prompt::TemplateError;
use crate::store::StoreError;
use crate::verification::VerificationError;

/// Error body returned by every endpoint: `{"error": {"code", "message"}}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let code = match &e {
            StoreError::NotFound { .. } => return ApiError::not_found(e.to_string()),
            StoreError::Filter(_) => "invalid_filter",
            StoreError::InvalidSchema(_) => "invalid_schema",
            StoreError::Config(_) => "invalid_config",
            StoreError::EmptySubset => "empty_subset",
            StoreError::InvalidTransition { .. } => {
                return ApiError::new(StatusCode::CONFLICT, "conflict", e.to_string())
            }
            StoreError::Io(_) | StoreError::Corrupt { .. } => {
                tracing::error!(error = %e, "store failure");
                return ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string());
            }
        };
        ApiError::bad_request(code, e.to_string())
    }
}

impl From<TemplateError> for ApiError {
    fn from(e: TemplateError) -> Self {
        ApiError::bad_request("invalid_template", e.to_string())
    }
}

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        match e {
            JobError::NotFound(_) => ApiError::not_found(e.to_string()),
            JobError::Store(s) => s.into(),
            JobError::ZeroParallelism => ApiError::bad_request("invalid_request", e.to_string()),
        }
    }
}

impl From<VerificationError> for ApiError {
    fn from(e: VerificationError) -> Self {
        match e {
            VerificationError::NotFound(_) => ApiError::not_found(e.to_string()),
            VerificationError::Store(s) => s.into(),
            VerificationError::Batch { ref source, .. } if matches!(**source, VerificationError::NotFound(_)) => {
                ApiError::not_found(e.to_string())
            }
            other => ApiError::bad_request("invalid_verification", other.to_string()),
        }
    }
}
