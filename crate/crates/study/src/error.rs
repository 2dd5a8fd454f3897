use std::path::PathBuf;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error("unknown session {0}")]
    UnknownSession(String),

    #[error("question {index} is out of range 1..={count}")]
    QuestionOutOfRange { index: usize, count: usize },

    #[error("position {0} is not one of 1, 2, 3")]
    InvalidPosition(usize),

    #[error("question {index} was already answered with position {recorded}")]
    AlreadyAnswered { index: usize, recorded: usize },

    #[error("no image named {0}")]
    UnknownImage(String),

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("no route for {0}")]
    NoRoute(String),

    #[error("invalid bundle: {0}")]
    Bundle(String),

    #[error("{path}:{line}: {message}")]
    Log { path: PathBuf, line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = StudyError> = std::result::Result<T, E>;

impl StudyError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code used in HTTP error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownSession(_) => "unknown_session",
            Self::QuestionOutOfRange { .. } => "question_out_of_range",
            Self::InvalidPosition(_) => "invalid_position",
            Self::AlreadyAnswered { .. } => "already_answered",
            Self::UnknownImage(_) => "unknown_image",
            Self::BadRequest(_) => "bad_request",
            Self::NoRoute(_) => "not_found",
            Self::Bundle(_) => "bad_bundle",
            Self::Log { .. } => "bad_log",
            Self::Io { .. } => "io_error",
            Self::Json(_) => "bad_json",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            Self::UnknownSession(_)
            | Self::QuestionOutOfRange { .. }
            | Self::UnknownImage(_)
            | Self::NoRoute(_) => {
                StatusCode::NOT_FOUND
            }
            Self::InvalidPosition(_) | Self::BadRequest(_) | Self::Json(_) => StatusCode::BAD_REQUEST,
            Self::AlreadyAnswered { .. } => StatusCode::CONFLICT,
            Self::Bundle(_) | Self::Log { .. } | Self::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Wire form of every error response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl IntoResponse for StudyError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code().to_string(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}
