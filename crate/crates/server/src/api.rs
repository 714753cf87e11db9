use std::convert::Infallible;
use std::path::Path as FsPath;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::mpsc;
use tokio_stream::wrappers::UnboundedReceiverStream;
use tokio_stream::StreamExt;
use tower_http::services::ServeDir;
use tutor_core::prompt::{ComposeError, ComposedPrompt};
use tutor_core::rag::{RagError, RetrievedChunk};
use tutor_core::selector::SelectionError;
use tutor_core::session::{SessionError, SubmitOutcome, SubmitSink};
use tutor_core::telemetry::TimeWindow;
use tutor_core::{GenerationParams, HardwareProfile, ResponseLevel, Session, TutorError};

use crate::{AppState, LoadStatus};

const MAX_UPLOAD_BYTES: usize = 32 * 1024 * 1024;

pub fn router(state: AppState, static_ui_dir: Option<&FsPath>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/model", get(model))
        .route("/models", get(models))
        .route("/models/rescan", post(rescan))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/clear", post(clear_session))
        .route("/sessions/{id}/level", post(set_level))
        .route("/documents", post(upload_document).get(list_documents))
        .route("/documents/{id}", axum::routing::delete(delete_document))
        .route("/metrics/report", get(metrics_report))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state);
    match static_ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(not_found),
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message, "kind": self.kind}))).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let message = e.to_string();
        match e {
            SessionError::UnknownSession(_) => Self::new(StatusCode::NOT_FOUND, "unknown_session", message),
            SessionError::NoModelLoaded => Self::new(StatusCode::SERVICE_UNAVAILABLE, "no_model_loaded", message),
            SessionError::EmptyMessage | SessionError::Compose(ComposeError::EmptyQuery) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "empty_message", message)
            }
            SessionError::Compose(ComposeError::BudgetTooSmall { .. }) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "budget_too_small", message)
            }
            SessionError::Inference(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "inference", message),
            SessionError::Snapshot { .. } => Self::internal(message),
        }
    }
}

impl From<RagError> for ApiError {
    fn from(e: RagError) -> Self {
        let message = e.to_string();
        match e {
            RagError::EmptyDocument(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "empty_document", message),
            RagError::UnknownDocument(_) => Self::new(StatusCode::NOT_FOUND, "unknown_document", message),
            _ => Self::internal(message),
        }
    }
}

impl From<TutorError> for ApiError {
    fn from(e: TutorError) -> Self {
        let message = e.to_string();
        match e {
            TutorError::Registry(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "registry_unreadable", message),
            TutorError::Selection(SelectionError::InvalidPolicy(_)) => Self::internal(message),
            TutorError::Selection(_) => Self::new(StatusCode::CONFLICT, "no_selection", message),
            TutorError::Probe(tutor_core::hardware::ProbeError::InvalidOverride(_)) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_override", message)
            }
            TutorError::Session(e) => e.into(),
            TutorError::Rag(e) => e.into(),
            _ => Self::internal(message),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))
}

fn parse_level(raw: &str) -> ApiResult<ResponseLevel> {
    raw.parse()
        .map_err(|e: tutor_core::prompt::UnknownLevel| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "unknown_level", e.to_string()))
}

fn parse_json<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", e.to_string()))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

async fn health(State(s): State<AppState>) -> Json<Value> {
    let engine = s.tutor.engine();
    let current = engine.current();
    let mut body = json!({
        "model_id": current.as_ref().map(|h| h.manifest.model_id.clone()),
        "uptime_s": s.started.elapsed().as_secs_f64(),
        "backend": engine.backend_name(),
    });
    let status = match (current, s.load_status()) {
        (Some(_), _) => "ok",
        (None, _) if engine.loading().is_some() => "loading",
        (None, LoadStatus::Pending | LoadStatus::Loading) => "loading",
        (None, LoadStatus::Failed(e)) => {
            body["error"] = json!(e);
            "no_model"
        }
        (None, LoadStatus::Ready) => "no_model",
    };
    body["status"] = json!(status);
    Json(body)
}

async fn model(State(s): State<AppState>) -> ApiResult<Json<Value>> {
    let no_model = || ApiError::from(SessionError::NoModelLoaded);
    let handle = s.tutor.engine().current().ok_or_else(no_model)?;
    let active = s.tutor.active().ok_or_else(no_model)?;
    Ok(Json(json!({
        "selection": active.selection,
        "profile": active.profile,
        "handle": {
            "handle_id": handle.handle_id,
            "model_id": handle.manifest.model_id,
            "loaded_at": handle.loaded_at,
            "load_metrics": handle.load_metrics,
        },
    })))
}

async fn models(State(s): State<AppState>) -> Json<Value> {
    let snap = s.tutor.registry().snapshot();
    Json(json!({
        "model_count": snap.manifests.len(),
        "models": snap.manifests,
        "scanned_at": snap.scanned_at,
        "scan_warnings": snap.scan_warnings,
    }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RescanBody {
    #[serde(default)]
    reselect: bool,
    #[serde(default)]
    hardware_override: Option<HardwareProfile>,
}

async fn rescan(State(s): State<AppState>, body: Bytes) -> ApiResult<Json<Value>> {
    let body: RescanBody = parse_json(&body)?;
    let tutor = s.tutor.clone();
    let out = blocking(move || tutor.rescan(body.reselect, body.hardware_override)).await??;
    if out.selection.is_some() && s.tutor.engine().current().is_some() {
        s.set_load_status(LoadStatus::Ready);
    }
    Ok(Json(json!({
        "model_count": out.snapshot.manifests.len(),
        "models": out.snapshot.manifests,
        "scanned_at": out.snapshot.scanned_at,
        "scan_warnings": out.snapshot.scan_warnings,
        "selection": out.selection,
        "model_changed": out.model_changed,
    })))
}

#[derive(Debug, Deserialize)]
struct CreateSessionBody {
    level: String,
    #[serde(default = "default_rag")]
    rag_enabled: bool,
}

fn default_rag() -> bool {
    true
}

#[derive(Debug, Serialize)]
struct SessionSummary {
    session_id: String,
    created_at: DateTime<Utc>,
    level: ResponseLevel,
    rag_enabled: bool,
    turn_count: usize,
    last_active: DateTime<Utc>,
}

fn summary(s: &Session) -> SessionSummary {
    SessionSummary {
        session_id: s.session_id.clone(),
        created_at: s.created_at,
        level: s.level,
        rag_enabled: s.rag_enabled,
        turn_count: s.turns.len(),
        last_active: s.last_active,
    }
}

async fn create_session(State(s): State<AppState>, Json(body): Json<CreateSessionBody>) -> ApiResult<Response> {
    let level = parse_level(&body.level)?;
    let session = s.tutor.sessions().create(level, body.rag_enabled);
    Ok((StatusCode::CREATED, Json(session)).into_response())
}

async fn list_sessions(State(s): State<AppState>) -> Json<Vec<SessionSummary>> {
    Json(s.tutor.sessions().list().iter().map(summary).collect())
}

async fn get_session(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Session>> {
    Ok(Json(s.tutor.sessions().get(&id)?))
}

async fn delete_session(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    s.tutor.sessions().delete(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn clear_session(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionSummary>> {
    let tutor = s.tutor.clone();
    let session = blocking(move || {
        tutor.sessions().clear_history(&id)?;
        tutor.sessions().get(&id)
    })
    .await??;
    Ok(Json(summary(&session)))
}

#[derive(Debug, Deserialize)]
struct LevelBody {
    level: String,
}

async fn set_level(State(s): State<AppState>, Path(id): Path<String>, Json(body): Json<LevelBody>) -> ApiResult<Json<SessionSummary>> {
    let level = parse_level(&body.level)?;
    s.tutor.sessions().set_level(&id, level)?;
    Ok(Json(summary(&s.tutor.sessions().get(&id)?)))
}

#[derive(Debug, Deserialize)]
struct MessageBody {
    text: String,
    /// Overrides individual fields of the configured generation defaults.
    #[serde(default)]
    params: Option<serde_json::Map<String, Value>>,
}

enum Progress {
    Started,
    Token(String),
    Done(Box<SubmitOutcome>),
    Failed(SessionError),
}

struct ChannelSink(mpsc::UnboundedSender<Progress>);

impl SubmitSink for ChannelSink {
    fn prompt_ready(&mut self, _prompt: &ComposedPrompt, _retrieved: &[RetrievedChunk]) {
        let _ = self.0.send(Progress::Started);
    }

    fn token(&mut self, token: &str) -> bool {
        // A closed channel means the client went away: stop generating.
        self.0.send(Progress::Token(token.to_string())).is_ok()
    }
}

fn merged_params(defaults: &GenerationParams, overrides: Option<serde_json::Map<String, Value>>) -> ApiResult<GenerationParams> {
    let Some(overrides) = overrides else {
        return Ok(defaults.clone());
    };
    let mut base = serde_json::to_value(defaults).expect("params serialize");
    for (k, v) in overrides {
        base[k] = v;
    }
    let params: GenerationParams =
        serde_json::from_value(base).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_params", e.to_string()))?;
    params
        .validate()
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_params", e.to_string()))?;
    Ok(params)
}

fn to_event(p: Progress) -> Event {
    match p {
        Progress::Token(t) => Event::default().event("token").data(json!({"text": t}).to_string()),
        Progress::Done(out) => Event::default().event("done").data(
            json!({
                "request_id": out.request_id,
                "session_id": out.session_id,
                "model_id": out.model_id,
                "metrics": out.metrics,
                "total_wall_ms": out.total_wall_ms,
                "text": out.assistant_turn.text,
                "prompt_estimated_tokens": out.prompt.estimated_tokens,
                "dropped_turns": out.prompt.dropped_turns,
                "dropped_chunks": out.prompt.dropped_chunks,
                "sources": out.retrieved.iter().map(|c| json!({
                    "doc_id": c.chunk.doc_id,
                    "source_name": c.chunk.source_name,
                    "chunk_index": c.chunk.chunk_index,
                    "score": c.score,
                    "rank": c.rank,
                })).collect::<Vec<_>>(),
            })
            .to_string(),
        ),
        Progress::Failed(e) => {
            let err = ApiError::from(e);
            Event::default()
                .event("error")
                .data(json!({"error": err.message, "kind": err.kind}).to_string())
        }
        Progress::Started => Event::default().comment("started"),
    }
}

/// Streams `token` events, then one `done` (or `error`). Failures before
/// generation starts are returned as plain HTTP errors instead.
async fn post_message(State(s): State<AppState>, Path(id): Path<String>, Json(body): Json<MessageBody>) -> ApiResult<Response> {
    let params = merged_params(&s.tutor.config().generation, body.params)?;
    let (tx, mut rx) = mpsc::unbounded_channel();
    let tutor = s.tutor.clone();
    tokio::task::spawn_blocking(move || {
        let mut sink = ChannelSink(tx.clone());
        let progress = match tutor.sessions().submit_message(&id, &body.text, &params, &mut sink) {
            Ok(out) => Progress::Done(Box::new(out)),
            Err(e) => Progress::Failed(e),
        };
        let _ = tx.send(progress);
    });
    match rx.recv().await {
        Some(Progress::Started) => {}
        Some(Progress::Failed(e)) => return Err(e.into()),
        _ => return Err(ApiError::internal("generation ended before it started")),
    }
    let events = UnboundedReceiverStream::new(rx).map(|p| Ok::<_, Infallible>(to_event(p)));
    Ok(Sse::new(events).keep_alive(KeepAlive::default()).into_response())
}

#[derive(Debug, Deserialize)]
struct DocumentQuery {
    name: Option<String>,
}

async fn upload_document(State(s): State<AppState>, Query(q): Query<DocumentQuery>, request: Request) -> ApiResult<Response> {
    let is_multipart = request
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, "invalid_upload", m);
    let (name, bytes) = if is_multipart {
        let mut form = Multipart::from_request(request, &s).await.map_err(|e| bad(e.to_string()))?;
        let mut found = None;
        while let Some(field) = form.next_field().await.map_err(|e| bad(e.to_string()))? {
            let file_name = field.file_name().map(str::to_string);
            if file_name.is_none() && field.name() != Some("file") {
                continue;
            }
            let data = field.bytes().await.map_err(|e| bad(e.to_string()))?;
            found = Some((file_name.or(q.name.clone()).unwrap_or_else(|| "document.txt".into()), data));
            break;
        }
        found.ok_or_else(|| bad("multipart body has no file field".into()))?
    } else {
        let data = Bytes::from_request(request, &s).await.map_err(|e| bad(e.to_string()))?;
        (q.name.unwrap_or_else(|| "document.txt".into()), data)
    };
    let text = String::from_utf8(bytes.to_vec())
        .map_err(|_| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "not_text", "document is not UTF-8 text"))?;
    let tutor = s.tutor.clone();
    let source = name.clone();
    let out = blocking(move || tutor.rag().ingest_document(&source, &text)).await??;
    let status = if out.already_present { StatusCode::OK } else { StatusCode::CREATED };
    Ok((
        status,
        Json(json!({
            "doc_id": out.doc_id,
            "chunk_count": out.chunk_count,
            "already_present": out.already_present,
            "source_name": name,
        })),
    )
        .into_response())
}

async fn list_documents(State(s): State<AppState>) -> Json<Value> {
    Json(json!(s.tutor.rag().list_documents()))
}

async fn delete_document(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let tutor = s.tutor.clone();
    blocking(move || tutor.rag().remove_document(&id)).await??;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    window: Option<String>,
}

async fn metrics_report(State(s): State<AppState>, Query(q): Query<ReportQuery>) -> ApiResult<Json<Value>> {
    let window = match q.window.as_deref() {
        None | Some("") => None,
        Some(raw) => Some(TimeWindow::last(humantime::parse_duration(raw).map_err(|e| {
            ApiError::new(StatusCode::BAD_REQUEST, "invalid_window", format!("window '{raw}': {e}"))
        })?)),
    };
    Ok(Json(json!(s.tutor.telemetry().report(window))))
}
