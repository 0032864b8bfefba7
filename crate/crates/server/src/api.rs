//! JSON routes and the per-session event stream.

use std::convert::Infallible;
use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use core_engine::{EdgeKind, Engine, EngineError, SessionEvent};
use serde::{Deserialize, Serialize};
use tokio_stream::wrappers::errors::BroadcastStreamRecvError;
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::{Stream, StreamExt};
use tower_http::services::ServeDir;
use tower_http::trace::TraceLayer;

use crate::events::Broadcaster;

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub events: Arc<Broadcaster>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>) -> Self {
        let events = Arc::new(Broadcaster::default());
        engine.set_event_sink(events.clone());
        AppState { engine, events }
    }
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    pub code: String,
    pub message: String,
    pub retriable: bool,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status, code: code.to_string(), message: message.into(), retriable: false }
    }

    fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::EmptyQuery => StatusCode::BAD_REQUEST,
            EngineError::UnknownSession(_) | EngineError::UnknownProcedure(_) | EngineError::UnknownFigure { .. } => {
                StatusCode::NOT_FOUND
            }
            EngineError::Graph(core_engine::GraphError::UnknownNode(_)) => StatusCode::NOT_FOUND,
            EngineError::Procedure(_) => StatusCode::UNPROCESSABLE_ENTITY,
            EngineError::Backend(core_engine::LlmError::BackendUnavailable(_)) => StatusCode::SERVICE_UNAVAILABLE,
            EngineError::Backend(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError { status, code: e.code().to_string(), message: e.to_string(), retriable: e.is_retriable() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs engine work off the async runtime; backends may block on I/O.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> Result<T, EngineError> + Send + 'static,
    T: Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())),
    }
}

pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let mut app = Router::new()
        .route("/api/ingest", post(ingest))
        .route("/api/procedures", get(list_procedures))
        .route("/api/procedures/{id}", get(get_procedure))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/query", post(query))
        .route("/api/sessions/{id}/events", get(events))
        .route("/api/figures/{procedure_id}/{n}", get(figure))
        .route("/api/graph/{node_id}/neighbors", get(neighbors));
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    app.layer(TraceLayer::new_for_http()).with_state(state)
}

#[derive(Deserialize)]
struct IngestPath {
    path: PathBuf,
}

/// Accepts `{"path": ...}` naming a bundle on the server's filesystem, or a
/// multipart upload with a `bundle` field plus one file field per figure
/// whose filename is the media path the bundle uses.
async fn ingest(State(st): State<AppState>, req: Request) -> ApiResult<Response> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));

    let (bundle, upload) = if is_multipart {
        let multipart =
            Multipart::from_request(req, &()).await.map_err(|e| ApiError::bad_request("bad_upload", e.body_text()))?;
        let (dir, bundle) = save_upload(multipart).await?;
        (bundle, Some(dir))
    } else {
        let Json(body) = Json::<IngestPath>::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request("bad_request", e.body_text()))?;
        if !body.path.is_file() {
            return Err(ApiError::bad_request("bundle_not_found", format!("{} is not a file", body.path.display())));
        }
        (body.path, None)
    };

    let engine = st.engine.clone();
    let summary = blocking(move || engine.ingest(&bundle)).await?;
    // Without a data directory the engine serves media from where it found
    // the bundle, so an uploaded bundle's directory has to outlive the request.
    if let Some(dir) = upload {
        if st.engine.data_dir().is_none() {
            let _ = dir.keep();
        }
    }
    Ok(Json(summary).into_response())
}

async fn save_upload(mut multipart: Multipart) -> ApiResult<(tempfile::TempDir, PathBuf)> {
    let dir =
        tempfile::tempdir().map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io_error", e.to_string()))?;
    let mut bundle = None;
    while let Some(field) =
        multipart.next_field().await.map_err(|e| ApiError::bad_request("bad_upload", e.body_text()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let target = if name == "bundle" {
            dir.path().join("procedure.json")
        } else {
            let rel = field.file_name().unwrap_or(&name).to_string();
            let rel_path = FsPath::new(&rel);
            if rel.is_empty() || !rel_path.components().all(|c| matches!(c, Component::Normal(_))) {
                return Err(ApiError::bad_request(
                    "path_escape",
                    format!("upload path {rel:?} is not a plain relative path"),
                ));
            }
            dir.path().join(rel_path)
        };
        let bytes = field.bytes().await.map_err(|e| ApiError::bad_request("bad_upload", e.body_text()))?;
        if let Some(parent) = target.parent() {
            tokio::fs::create_dir_all(parent)
                .await
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io_error", e.to_string()))?;
        }
        tokio::fs::write(&target, &bytes)
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io_error", e.to_string()))?;
        if name == "bundle" {
            bundle = Some(target);
        }
    }
    let bundle = bundle.ok_or_else(|| ApiError::bad_request("bad_upload", "multipart upload has no `bundle` field"))?;
    Ok((dir, bundle))
}

async fn list_procedures(State(st): State<AppState>) -> impl IntoResponse {
    Json(st.engine.list_procedures())
}

async fn get_procedure(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let p = st.engine.get_procedure(&id)?;
    Ok(Json(&*p).into_response())
}

async fn create_session(State(st): State<AppState>) -> impl IntoResponse {
    (StatusCode::CREATED, Json(st.engine.create_session()))
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(st.engine.get_session(&id)?).into_response())
}

#[derive(Deserialize)]
struct QueryBody {
    text: String,
}

async fn query(State(st): State<AppState>, Path(id): Path<String>, body: Json<QueryBody>) -> ApiResult<Response> {
    let engine = st.engine.clone();
    let outcome = blocking(move || engine.handle_query(&id, &body.text)).await?;
    Ok(Json(outcome).into_response())
}

#[derive(Deserialize)]
struct EventsParams {
    after: Option<u64>,
}

fn sse_event(e: &SessionEvent) -> Event {
    Event::default().event(e.kind()).id(e.seq.to_string()).data(serde_json::to_string(e).expect("events serialize"))
}

/// Replays logged events after `Last-Event-ID` (or `?after=`), then streams
/// live ones. Subscribing before reading the log means no event falls
/// between the two; seq filtering drops the overlap.
async fn events(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(params): Query<EventsParams>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    if !st.engine.has_session(&id) {
        return Err(EngineError::UnknownSession(id).into());
    }
    let after = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse().ok())
        .or(params.after)
        .unwrap_or(0);
    let live = BroadcastStream::new(st.events.subscribe(&id));
    let engine = st.engine.clone();
    let replay = blocking(move || engine.events_since(&id, after)).await?;

    let mut last = replay.last().map_or(after, |e| e.seq);
    let live = live.filter_map(move |item| match item {
        Ok(e) if e.seq > last => {
            last = e.seq;
            Some(sse_event(&e))
        }
        Ok(_) => None,
        Err(BroadcastStreamRecvError::Lagged(missed)) => {
            Some(Event::default().event("Gap").data(serde_json::json!({ "missed": missed }).to_string()))
        }
    });
    let replay: Vec<Event> = replay.iter().map(sse_event).collect();
    let stream = tokio_stream::iter(replay).chain(live).map(Ok);
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn figure(State(st): State<AppState>, Path((procedure_id, n)): Path<(String, u32)>) -> ApiResult<Response> {
    let path = st.engine.figure_path(&procedure_id, n)?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "figure_missing", format!("{}: {e}", path.display())))?;
    let mime = mime_guess::from_path(&path).first_or_octet_stream();
    Ok(([(header::CONTENT_TYPE, mime.to_string())], Body::from(bytes)).into_response())
}

#[derive(Deserialize)]
struct NeighborParams {
    kind: Option<String>,
}

async fn neighbors(
    State(st): State<AppState>,
    Path(node_id): Path<String>,
    Query(params): Query<NeighborParams>,
) -> ApiResult<Response> {
    let kind = params
        .kind
        .map(|k| k.parse::<EdgeKind>())
        .transpose()
        .map_err(|e| ApiError::bad_request("bad_edge_kind", e))?;
    Ok(Json(st.engine.graph_neighbors(&node_id, kind)?).into_response())
}
