use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::error::ServiceError;
use crate::session::Session;
use crate::workflow::{ComposeRequest, GenerateRequest, PostEditRequest, ScoreRequest, SelectRequest, Workbench};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body())).into_response()
    }
}

type Shared = Arc<Workbench>;
type Reply<T> = Result<Json<T>, ServiceError>;

async fn blocking<T, F>(wb: Shared, f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce(&Workbench) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&wb))
        .await
        .map_err(|e| ServiceError::Storage(format!("worker failed: {e}")))?
}

#[derive(Debug, Deserialize)]
struct CreateRequest {
    sl: String,
}

#[derive(Debug, Deserialize)]
struct CandidatesRequest {
    #[serde(default)]
    session_ids: Vec<String>,
}

#[derive(Debug, Serialize)]
struct SessionList {
    sessions: Vec<String>,
}

/// Missing or empty bodies read as defaults for steps whose parameters are all
/// optional.
fn optional<T: Default + serde::de::DeserializeOwned>(body: &str) -> Result<T, ServiceError> {
    if body.trim().is_empty() {
        return Ok(T::default());
    }
    serde_json::from_str(body).map_err(|e| ServiceError::Validation(format!("bad request body: {e}")))
}

fn required<T: serde::de::DeserializeOwned>(body: &str) -> Result<T, ServiceError> {
    serde_json::from_str(body).map_err(|e| ServiceError::Validation(format!("bad request body: {e}")))
}

async fn create(State(wb): State<Shared>, body: String) -> Result<(StatusCode, Json<Session>), ServiceError> {
    let req: CreateRequest = required(&body)?;
    let s = blocking(wb, move |wb| wb.create(&req.sl)).await?;
    Ok((StatusCode::CREATED, Json(s)))
}

async fn list(State(wb): State<Shared>) -> Json<SessionList> {
    Json(SessionList {
        sessions: wb.store.ids(),
    })
}

async fn show(State(wb): State<Shared>, Path(id): Path<String>) -> Reply<Session> {
    wb.get(&id).map(Json)
}

async fn analyze(State(wb): State<Shared>, Path(id): Path<String>) -> Reply<Session> {
    blocking(wb, move |wb| wb.analyze(&id)).await.map(Json)
}

async fn retrieve(State(wb): State<Shared>, Path(id): Path<String>) -> Reply<Session> {
    blocking(wb, move |wb| wb.retrieve(&id)).await.map(Json)
}

async fn select(State(wb): State<Shared>, Path((id, rank)): Path<(String, usize)>, body: String) -> Reply<Session> {
    let req: SelectRequest = required(&body)?;
    blocking(wb, move |wb| wb.select(&id, rank, req)).await.map(Json)
}

async fn compose(State(wb): State<Shared>, Path(id): Path<String>, body: String) -> Reply<Session> {
    let req: ComposeRequest = optional(&body)?;
    blocking(wb, move |wb| wb.compose(&id, req)).await.map(Json)
}

async fn generate(State(wb): State<Shared>, Path(id): Path<String>, body: String) -> Reply<Session> {
    let req: GenerateRequest = optional(&body)?;
    blocking(wb, move |wb| wb.generate(&id, req)).await.map(Json)
}

async fn post_edit(State(wb): State<Shared>, Path(id): Path<String>, body: String) -> Reply<Session> {
    let req: PostEditRequest = required(&body)?;
    blocking(wb, move |wb| wb.post_edit(&id, req)).await.map(Json)
}

async fn score(State(wb): State<Shared>, Path(id): Path<String>, body: String) -> Reply<Session> {
    let req: ScoreRequest = required(&body)?;
    blocking(wb, move |wb| wb.score(&id, req)).await.map(Json)
}

async fn archive(State(wb): State<Shared>, Path(id): Path<String>) -> Reply<Session> {
    blocking(wb, move |wb| wb.archive(&id)).await.map(Json)
}

async fn export(State(wb): State<Shared>, Path(id): Path<String>) -> Reply<crate::session::Worksheet> {
    wb.export(&id).map(Json)
}

async fn kb_status(State(wb): State<Shared>) -> Json<crate::workflow::KbStatus> {
    Json(wb.kb_status())
}

async fn kb_candidates(State(wb): State<Shared>, body: String) -> Result<Response, ServiceError> {
    let req: CandidatesRequest = required(&body)?;
    let corpus = wb.kb_candidates(&req.session_ids)?;
    let mut out = Vec::new();
    corpus
        .write_jsonl(&mut out)
        .map_err(|e| ServiceError::Storage(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson; charset=utf-8")], out).into_response())
}

/// Routes for the workbench API; static assets are served from `static_dir`
/// at `/` when given.
pub fn router(workbench: Arc<Workbench>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create).get(list))
        .route("/sessions/{id}", get(show))
        .route("/sessions/{id}/analyze", post(analyze))
        .route("/sessions/{id}/retrieve", post(retrieve))
        .route("/sessions/{id}/hits/{rank}", post(select))
        .route("/sessions/{id}/compose", post(compose))
        .route("/sessions/{id}/generate", post(generate))
        .route("/sessions/{id}/post_edit", post(post_edit))
        .route("/sessions/{id}/score", post(score))
        .route("/sessions/{id}/archive", post(archive))
        .route("/sessions/{id}/export", get(export))
        .route("/kb/status", get(kb_status))
        .route("/kb/candidates", post(kb_candidates))
        .with_state(workbench);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds and serves until the process is stopped.
pub async fn serve(workbench: Arc<Workbench>, bind: &str, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(workbench, static_dir)).await
}
