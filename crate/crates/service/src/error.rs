use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use trackscreen_core::evaluate::EvaluateError;
use trackscreen_core::store::StoreError;
use trackscreen_core::DetectError;

/// Body of every error response and of CLI errors on stderr.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub hint: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>, hint: impl Into<String>) -> ApiError {
        ApiError {
            status,
            body: ErrorBody { code: code.to_string(), message: message.into(), hint: hint.into() },
        }
    }

    pub fn not_found(code: &str, message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::NOT_FOUND, code, message, "")
    }

    pub fn invalid(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message, "")
    }

    pub fn not_materialized(slice: &str) -> ApiError {
        ApiError::new(
            StatusCode::CONFLICT,
            "not_materialized",
            format!("no detection results for slice {slice}"),
            format!("POST /api/detect with {{\"slice\": \"{slice}\"}} and retry when the run is done"),
        )
    }

    pub fn internal(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message, "")
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.body.code, self.body.message)
    }
}

impl std::error::Error for ApiError {}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotMaterialized { slice, method } => ApiError::new(
                StatusCode::CONFLICT,
                "not_materialized",
                format!("no {method} result for slice {slice}"),
                format!("POST /api/detect with {{\"slice\": \"{slice}\", \"method_ids\": [\"{method}\"]}}"),
            ),
            StoreError::Screen(e) => e.into(),
            other => {
                tracing::error!(error = %other, "store failure");
                ApiError::internal("storage failure")
            }
        }
    }
}

impl From<EvaluateError> for ApiError {
    fn from(e: EvaluateError) -> Self {
        match e {
            EvaluateError::StaleCursor(_) => ApiError::new(
                StatusCode::CONFLICT,
                "stale_cursor",
                e.to_string(),
                "request the first page again without a cursor",
            ),
            EvaluateError::MissingMethod(m) => ApiError::new(
                StatusCode::CONFLICT,
                "not_materialized",
                e.to_string(),
                format!("POST /api/detect with method_ids [\"{m}\"]"),
            ),
        }
    }
}

impl From<DetectError> for ApiError {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::InvalidConfig(_) | DetectError::UnknownMethod(_) => ApiError::invalid(e.to_string()),
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
