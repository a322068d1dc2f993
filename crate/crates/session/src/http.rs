//! HTTP/JSON routes. Errors are `application/problem+json` documents carrying
//! a stable `code`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::SessionError;
use crate::service::{ConstraintUpdate, SessionService};
use crate::session::{CreateSession, WhatIfQuery};

pub const SECRET_HEADER: &str = "x-session-secret";

/// Problem document returned for every error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    #[serde(rename = "type")]
    pub kind: String,
    pub title: String,
    pub status: u16,
    pub detail: String,
    pub code: String,
}

impl From<&SessionError> for Problem {
    fn from(e: &SessionError) -> Self {
        Self {
            kind: format!("urn:taper:problem:{}", e.code()),
            title: e.title().to_string(),
            status: e.status(),
            detail: e.to_string(),
            code: e.code().to_string(),
        }
    }
}

pub struct ApiError(pub SessionError);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let problem = Problem::from(&self.0);
        let status = StatusCode::from_u16(problem.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = serde_json::to_vec(&problem).unwrap_or_default();
        (status, [(header::CONTENT_TYPE, "application/problem+json")], body).into_response()
    }
}

/// JSON body whose rejections become problem documents.
pub struct Body<T>(pub T);

impl<S, T> FromRequest<S> for Body<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Self(v)),
            Err(e) => Err(ApiError(SessionError::MalformedBody(rejection_detail(&e)))),
        }
    }
}

fn rejection_detail(e: &JsonRejection) -> String {
    e.body_text()
}

type Shared = Arc<SessionService>;
type ApiResult<T> = Result<Json<T>, ApiError>;

fn secret(headers: &HeaderMap) -> Option<&str> {
    headers.get(SECRET_HEADER).and_then(|v| v.to_str().ok())
}

/// Runs a committing operation off the async workers, since it waits on a
/// disk flush.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, SessionError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(SessionError::Storage(std::io::Error::other(e.to_string()))))?
        .map_err(ApiError)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasurementBody {
    pub y: f64,
    pub token: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AbortBody {
    #[serde(default)]
    pub reason: Option<String>,
}

async fn create(State(svc): State<Shared>, Body(req): Body<CreateSession>) -> Result<Response, ApiError> {
    let created = blocking(move || svc.create(req)).await?;
    let location = format!("/sessions/{}", created.id);
    Ok((StatusCode::CREATED, [(header::LOCATION, location)], Json(created)).into_response())
}

async fn show(State(svc): State<Shared>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult<impl Serialize> {
    Ok(Json(svc.get(&id, secret(&headers))?))
}

async fn measure(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Body(body): Body<MeasurementBody>,
) -> ApiResult<impl Serialize> {
    let secret = secret(&headers).map(str::to_owned);
    Ok(Json(blocking(move || svc.submit(&id, secret.as_deref(), body.y, &body.token)).await?))
}

async fn what_if(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Body(query): Body<WhatIfQuery>,
) -> ApiResult<impl Serialize> {
    Ok(Json(svc.what_if(&id, secret(&headers), &query)?))
}

async fn constraint(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Body(update): Body<ConstraintUpdate>,
) -> ApiResult<impl Serialize> {
    let secret = secret(&headers).map(str::to_owned);
    Ok(Json(blocking(move || svc.update_constraint(&id, secret.as_deref(), &update)).await?))
}

async fn complete(State(svc): State<Shared>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult<impl Serialize> {
    let secret = secret(&headers).map(str::to_owned);
    Ok(Json(blocking(move || svc.complete(&id, secret.as_deref())).await?))
}

async fn abort(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<impl Serialize> {
    let secret = secret(&headers).map(str::to_owned);
    // the body is optional
    let reason = if body.iter().all(u8::is_ascii_whitespace) {
        None
    } else {
        serde_json::from_slice::<AbortBody>(&body)
            .map_err(|e| ApiError(SessionError::MalformedBody(e.to_string())))?
            .reason
    };
    Ok(Json(blocking(move || svc.abort(&id, secret.as_deref(), reason)).await?))
}

async fn not_found() -> ApiError {
    ApiError(SessionError::UnknownSession("no such route".into()))
}

pub fn router(service: Arc<SessionService>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(show))
        .route("/sessions/{id}/measurements", post(measure))
        .route("/sessions/{id}/what-if", post(what_if))
        .route("/sessions/{id}/constraint", patch(constraint))
        .route("/sessions/{id}/complete", post(complete))
        .route("/sessions/{id}/abort", post(abort))
        .fallback(not_found)
        .with_state(service)
}

/// Serves until the process receives Ctrl-C.
pub async fn serve(service: Arc<SessionService>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
