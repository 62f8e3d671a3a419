//! HTTP/JSON gateway: job submission, status, event feeds, summary results,
//! artifact access for trusted callers and catalog listing.

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use morf_core::orchestrator::{Orchestrator, OrchestratorError, Submission, SubmitError};
use morf_core::registry::{Access, RegistryError};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::{info, warn};

/// Largest accepted request body (image uploads).
pub const MAX_UPLOAD_BYTES: usize = 1 << 30;

/// Who a bearer token belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Identity {
    pub user: String,
    pub trusted: bool,
}

/// Static bearer tokens. With no tokens configured every request is an
/// anonymous, untrusted caller.
#[derive(Debug, Clone, Default)]
pub struct Auth {
    tokens: HashMap<String, Identity>,
}

#[derive(Debug, thiserror::Error)]
#[error("tokens file line {line}: {message}")]
pub struct TokenFileError {
    pub line: usize,
    pub message: String,
}

impl Auth {
    pub fn open() -> Self {
        Auth::default()
    }

    pub fn with_token(mut self, token: &str, user: &str, trusted: bool) -> Self {
        self.tokens.insert(
            token.to_string(),
            Identity {
                user: user.to_string(),
                trusted,
            },
        );
        self
    }

    /// Parses `<token> <user> [trusted]` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, TokenFileError> {
        let mut auth = Auth::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let trusted = match fields.get(2) {
                None => false,
                Some(&"trusted") => true,
                Some(other) => {
                    return Err(TokenFileError {
                        line: i + 1,
                        message: format!("unknown flag `{other}`"),
                    })
                }
            };
            if fields.len() < 2 || fields.len() > 3 {
                return Err(TokenFileError {
                    line: i + 1,
                    message: "expected `<token> <user> [trusted]`".into(),
                });
            }
            auth = auth.with_token(fields[0], fields[1], trusted);
        }
        Ok(auth)
    }

    pub fn is_open(&self) -> bool {
        self.tokens.is_empty()
    }

    fn identify(&self, headers: &HeaderMap) -> Result<Option<Identity>, ApiError> {
        if self.is_open() {
            return Ok(None);
        }
        let token = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "missing bearer token"))?;
        self.tokens
            .get(token.trim())
            .cloned()
            .map(Some)
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unknown token"))
    }
}

#[derive(Clone)]
pub struct AppState {
    pub orch: Arc<Orchestrator>,
    pub auth: Arc<Auth>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: json!({ "error": message.into() }),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let status = match &e {
            OrchestratorError::UnknownJob(_) | OrchestratorError::NoResults { .. } => {
                StatusCode::NOT_FOUND
            }
            OrchestratorError::WrongState { .. } => StatusCode::CONFLICT,
            OrchestratorError::Compare(_) => StatusCode::UNPROCESSABLE_ENTITY,
            OrchestratorError::Registry(r) => return r.into(),
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<&RegistryError> for ApiError {
    fn from(e: &RegistryError) -> Self {
        let status = match e {
            RegistryError::NotFound(_) => StatusCode::NOT_FOUND,
            RegistryError::Forbidden(_) => StatusCode::FORBIDDEN,
            RegistryError::BadId(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        (&e).into()
    }
}

fn join_error(e: tokio::task::JoinError) -> ApiError {
    ApiError::new(
        StatusCode::INTERNAL_SERVER_ERROR,
        format!("worker failed: {e}"),
    )
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route(
            "/jobs",
            post(submit)
                .get(list_jobs)
                .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES)),
        )
        .route("/jobs/{id}", get(job_status))
        .route("/jobs/{id}/events", get(job_events))
        .route("/jobs/{id}/results", get(job_results))
        .route("/jobs/{id}/artifacts", get(job_artifacts))
        .route("/artifacts/{id}", get(artifact))
        .route("/courses", get(courses))
        .route("/registry/fsck", get(fsck))
        .route("/compare", get(compare))
        .with_state(state)
}

/// Serves the router until the listener fails or ctrl-c arrives.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> anyhow::Result<()> {
    info!(addr = %listener.local_addr()?, "gateway listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub job_id: String,
    pub state: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

async fn submit(
    State(st): State<AppState>,
    headers: HeaderMap,
    mut form: Multipart,
) -> ApiResult<Response> {
    let who = st.auth.identify(&headers)?;
    let mut sub = Submission {
        user: who.map(|w| w.user),
        ..Submission::default()
    };
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, m);
    while let Some(field) = form.next_field().await.map_err(|e| bad(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "config" => sub.config = field.text().await.map_err(|e| bad(e.to_string()))?,
            "script" | "controller" | "rules" => {
                sub.script = Some(field.text().await.map_err(|e| bad(e.to_string()))?)
            }
            "image" => {
                sub.image = Some(
                    field
                        .bytes()
                        .await
                        .map_err(|e| bad(e.to_string()))?
                        .to_vec(),
                )
            }
            other => return Err(bad(format!("unexpected form field `{other}`"))),
        }
    }
    if sub.config.trim().is_empty() {
        return Err(bad("missing `config` form field".into()));
    }
    let orch = st.orch.clone();
    let outcome = tokio::task::spawn_blocking(move || orch.submit_job(sub))
        .await
        .map_err(join_error)?;
    match outcome {
        Ok(rec) if rec.failure_reason.is_some() => {
            info!(job = %rec.job_id, "submission rejected by validation");
            Ok((
                StatusCode::UNPROCESSABLE_ENTITY,
                Json(SubmitResponse {
                    job_id: rec.job_id,
                    state: rec.state.to_string(),
                    error: rec.failure_reason,
                }),
            )
                .into_response())
        }
        Ok(rec) => Ok((
            StatusCode::ACCEPTED,
            Json(SubmitResponse {
                job_id: rec.job_id,
                state: rec.state.to_string(),
                error: None,
            }),
        )
            .into_response()),
        Err(SubmitError::Orchestrator(e)) => Err(e.into()),
        Err(e) => Err(bad(e.to_string())),
    }
}

async fn list_jobs(State(st): State<AppState>, headers: HeaderMap) -> ApiResult<Response> {
    st.auth.identify(&headers)?;
    Ok(Json(st.orch.jobs()).into_response())
}

async fn job_status(
    State(st): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    st.auth.identify(&headers)?;
    Ok(Json(st.orch.job(&id)?).into_response())
}

async fn job_events(
    State(st): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    st.auth.identify(&headers)?;
    Ok(Json(st.orch.events(&id)?).into_response())
}

#[derive(Debug, Deserialize)]
struct ResultsQuery {
    format: Option<String>,
}

async fn job_results(
    State(st): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<ResultsQuery>,
) -> ApiResult<Response> {
    st.auth.identify(&headers)?;
    let orch = st.orch.clone();
    let results = tokio::task::spawn_blocking(move || orch.results(&id))
        .await
        .map_err(join_error)??;
    match q.format.as_deref() {
        None | Some("json") => Ok(Json(results).into_response()),
        Some("csv") => Ok((
            [(header::CONTENT_TYPE, "text/csv; charset=utf-8")],
            results.to_csv(),
        )
            .into_response()),
        Some(other) => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("unknown format `{other}` (expected json or csv)"),
        )),
    }
}

async fn job_artifacts(
    State(st): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    st.auth.identify(&headers)?;
    st.orch.job(&id)?;
    Ok(Json(st.orch.registry().records_for_job(&id)).into_response())
}

async fn artifact(
    State(st): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let who = st.auth.identify(&headers)?;
    let access = match &who {
        Some(w) => Access::user(&w.user, w.trusted),
        None => Access::default(),
    };
    let orch = st.orch.clone();
    let lookup = id.clone();
    let outcome =
        tokio::task::spawn_blocking(move || orch.registry().get_artifact(&lookup, &access))
            .await
            .map_err(join_error)?;
    match outcome {
        Ok((record, bytes)) => Ok((
            [
                (header::CONTENT_TYPE, "application/octet-stream".to_string()),
                (
                    header::HeaderName::from_static("x-morf-digest"),
                    record.digest,
                ),
                (
                    header::HeaderName::from_static("x-morf-kind"),
                    record.kind.to_string(),
                ),
            ],
            bytes,
        )
            .into_response()),
        Err(e) => {
            if matches!(e, RegistryError::Forbidden(_)) {
                warn!(artifact = %id, user = ?who.map(|w| w.user), "restricted artifact request denied");
            }
            Err(e.into())
        }
    }
}

async fn courses(State(st): State<AppState>, headers: HeaderMap) -> ApiResult<Response> {
    st.auth.identify(&headers)?;
    Ok(Json(json!({
        "dataset_version": st.orch.catalog().dataset_version,
        "courses": st.orch.courses(),
    }))
    .into_response())
}

async fn fsck(State(st): State<AppState>, headers: HeaderMap) -> ApiResult<Response> {
    st.auth.identify(&headers)?;
    let orch = st.orch.clone();
    let report = tokio::task::spawn_blocking(move || orch.registry().fsck())
        .await
        .map_err(join_error)?;
    Ok(Json(json!({
        "ok": report.ok(),
        "blobs_checked": report.blobs_checked,
        "records_checked": report.records_checked,
        "problems": report.problems,
    }))
    .into_response())
}

#[derive(Debug, Deserialize)]
struct CompareQuery {
    a: String,
    b: String,
    metric: Option<String>,
}

async fn compare(
    State(st): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<CompareQuery>,
) -> ApiResult<Response> {
    st.auth.identify(&headers)?;
    let metric = q.metric.unwrap_or_else(|| "auc".into());
    let orch = st.orch.clone();
    let result = tokio::task::spawn_blocking(move || orch.compare(&q.a, &q.b, &metric))
        .await
        .map_err(join_error)??;
    Ok(Json(result).into_response())
}
