use uuid::Uuid;

use crate::session::SessionStatus;

/// Errors surfaced by the session service. Every variant maps to a stable
/// machine-readable code and an HTTP status.
#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("no session with id {0}")]
    UnknownSession(String),
    #[error("the X-Session-Secret header is required")]
    MissingSecret,
    #[error("the session secret does not match")]
    InvalidSecret,
    #[error("invalid gains: {0}")]
    InvalidGains(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed request body: {0}")]
    MalformedBody(String),
    #[error("session is {0:?}; only active sessions accept this operation")]
    NotActive(SessionStatus),
    #[error("token {token:?} was already used for y = {committed}")]
    TokenConflict { token: String, committed: f64 },
    #[error("the last issued dose is {0}; a session completes only after a zero dose")]
    DoseNotZero(f64),
    #[error("no committed measurement to re-evaluate")]
    NoCommits,
    #[error("replay of session {id} diverged at step {step}: recorded {recorded}, recomputed {recomputed}")]
    ReplayMismatch { id: Uuid, step: usize, recorded: f64, recomputed: f64 },
    #[error("corrupt event log for session {id}: {detail}")]
    CorruptLog { id: String, detail: String },
    #[error("storage failure: {0}")]
    Storage(#[from] std::io::Error),
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownSession(_) => "unknown_session",
            Self::MissingSecret => "missing_secret",
            Self::InvalidSecret => "invalid_secret",
            Self::InvalidGains(_) => "invalid_gains",
            Self::InvalidInput(_) => "invalid_input",
            Self::MalformedBody(_) => "malformed_body",
            Self::NotActive(_) => "session_not_active",
            Self::TokenConflict { .. } => "token_conflict",
            Self::DoseNotZero(_) => "dose_not_zero",
            Self::NoCommits => "no_commits",
            Self::ReplayMismatch { .. } => "replay_mismatch",
            Self::CorruptLog { .. } => "corrupt_log",
            Self::Storage(_) => "storage_failure",
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            Self::UnknownSession(_) => 404,
            Self::MissingSecret => 401,
            Self::InvalidSecret => 403,
            Self::InvalidGains(_) | Self::InvalidInput(_) => 422,
            Self::MalformedBody(_) => 400,
            Self::NotActive(_) | Self::TokenConflict { .. } | Self::DoseNotZero(_) | Self::NoCommits => 409,
            Self::ReplayMismatch { .. } | Self::CorruptLog { .. } | Self::Storage(_) => 500,
        }
    }

    pub fn title(&self) -> &'static str {
        match self {
            Self::UnknownSession(_) => "Unknown session",
            Self::MissingSecret => "Missing session secret",
            Self::InvalidSecret => "Invalid session secret",
            Self::InvalidGains(_) => "Invalid gains",
            Self::InvalidInput(_) => "Invalid input",
            Self::MalformedBody(_) => "Malformed request body",
            Self::NotActive(_) => "Session not active",
            Self::TokenConflict { .. } => "Token reused with a different value",
            Self::DoseNotZero(_) => "Dose not yet zero",
            Self::NoCommits => "Nothing committed yet",
            Self::ReplayMismatch { .. } => "Replay mismatch",
            Self::CorruptLog { .. } => "Corrupt event log",
            Self::Storage(_) => "Storage failure",
        }
    }
}

pub type Result<T, E = SessionError> = std::result::Result<T, E>;
