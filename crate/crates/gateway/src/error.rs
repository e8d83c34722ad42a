use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use proctor_core::store::StoreError;
use serde::Serialize;

/// Every error code the API can return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    InvalidRequest,
    UnknownTask,
    TooManyParticipants,
    NotFound,
    DuplicateRun,
    RunNotActive,
    SessionBusy,
    BadFilter,
    StorageFailure,
    UpstreamUnreachable,
    UpstreamError,
    Internal,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 12] = [
        ErrorCode::InvalidRequest,
        ErrorCode::UnknownTask,
        ErrorCode::TooManyParticipants,
        ErrorCode::NotFound,
        ErrorCode::DuplicateRun,
        ErrorCode::RunNotActive,
        ErrorCode::SessionBusy,
        ErrorCode::BadFilter,
        ErrorCode::StorageFailure,
        ErrorCode::UpstreamUnreachable,
        ErrorCode::UpstreamError,
        ErrorCode::Internal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::InvalidRequest => "invalid_request",
            ErrorCode::UnknownTask => "unknown_task",
            ErrorCode::TooManyParticipants => "too_many_participants",
            ErrorCode::NotFound => "not_found",
            ErrorCode::DuplicateRun => "duplicate_run",
            ErrorCode::RunNotActive => "run_not_active",
            ErrorCode::SessionBusy => "session_busy",
            ErrorCode::BadFilter => "bad_filter",
            ErrorCode::StorageFailure => "storage_failure",
            ErrorCode::UpstreamUnreachable => "upstream_unreachable",
            ErrorCode::UpstreamError => "upstream_error",
            ErrorCode::Internal => "internal",
        }
    }

    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::InvalidRequest | ErrorCode::UnknownTask | ErrorCode::TooManyParticipants | ErrorCode::BadFilter => {
                StatusCode::BAD_REQUEST
            }
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::DuplicateRun | ErrorCode::RunNotActive | ErrorCode::SessionBusy => StatusCode::CONFLICT,
            ErrorCode::UpstreamUnreachable | ErrorCode::UpstreamError => StatusCode::BAD_GATEWAY,
            ErrorCode::StorageFailure | ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    pub http_status: u16,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into(), http_status: code.status().as_u16() }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::InvalidRequest, message)
    }

    pub fn not_found(what: impl std::fmt::Display) -> Self {
        Self::new(ErrorCode::NotFound, format!("{what} not found"))
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let code = match &e {
            StoreError::DuplicateRun(_) => ErrorCode::DuplicateRun,
            StoreError::UnknownRun(_) => ErrorCode::NotFound,
            StoreError::RunNotRunning { .. } | StoreError::BadTransition { .. } => ErrorCode::RunNotActive,
            StoreError::BadFilter(_) => ErrorCode::BadFilter,
            StoreError::StorageFailure { .. } => ErrorCode::StorageFailure,
        };
        Self::new(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(self)).into_response()
    }
}
