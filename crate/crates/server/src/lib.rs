//! HTTP/WebSocket front end for painting sessions.
//!
//! Requests on one session are serialized by a per-session lock. Sampling
//! runs on the blocking pool, bounded by a semaphore, against a snapshot of
//! the session; the result is attached only if the session did not change in
//! the meantime.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cnp_core::diffusion::NoiseSchedule;
use cnp_core::model::Mdt;
use cnp_core::render::encode_png;
use cnp_core::session::{complete_variants, CompleteParams, Session, DEFAULT_ERASE_SIDE};
use cnp_core::stroke::{ClassLabel, GridLayout, Stroke, StrokeSequence};
use cnp_core::train::Checkpoint;
use cnp_core::Error as CoreError;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{broadcast, Mutex, Semaphore};

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_RENDER_SIZE: usize = 512;

/// Notification pushed to stream subscribers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub session: String,
    pub event: String,
    pub state_version: u64,
}

pub struct AppState {
    pub model: Arc<Mdt<f32>>,
    pub schedule: NoiseSchedule,
    pub class_names: Vec<String>,
    pub grid: GridLayout,
    /// Session logs are written here when set.
    pub data_dir: Option<PathBuf>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    samplers: Semaphore,
    events: broadcast::Sender<Event>,
}

impl AppState {
    pub fn new(model: Mdt<f32>, schedule: NoiseSchedule, class_names: Vec<String>, data_dir: Option<PathBuf>) -> Self {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        AppState {
            model: Arc::new(model),
            schedule,
            class_names,
            grid: GridLayout::default(),
            data_dir,
            sessions: Mutex::new(HashMap::new()),
            samplers: Semaphore::new(workers),
            events: broadcast::channel(256).0,
        }
    }

    pub fn from_checkpoint(path: impl AsRef<Path>, data_dir: Option<PathBuf>) -> anyhow::Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let model = ckpt.ema_model()?;
        let mut names = ckpt.class_names.clone();
        if names.len() < model.config.num_classes {
            names = (0..model.config.num_classes).map(|c| format!("class-{c}")).collect();
        }
        Ok(Self::new(model, ckpt.schedule, names, data_dir))
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Event> {
        self.events.subscribe()
    }

    fn notify(&self, session: &Session, event: &str) {
        let _ = self.events.send(Event {
            session: session.id.clone(),
            event: event.to_string(),
            state_version: session.version,
        });
    }

    fn log_path(&self, id: &str) -> Option<PathBuf> {
        self.data_dir.as_ref().map(|d| d.join("sessions").join(format!("{id}.jsonl")))
    }

    fn persist(&self, session: &Session) -> Result<(), ApiError> {
        if let Some(path) = self.log_path(&session.id) {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| ApiError::internal(e.to_string()))?;
            }
            session.save(&path)?;
        }
        Ok(())
    }

    async fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let mut map = self.sessions.lock().await;
        if let Some(s) = map.get(id) {
            return Ok(s.clone());
        }
        // ids are uuids; anything else never touches the filesystem
        let on_disk = uuid::Uuid::parse_str(id).ok().and_then(|_| self.log_path(id)).filter(|p| p.exists());
        match on_disk {
            Some(path) => {
                let s = Arc::new(Mutex::new(Session::load(&path)?));
                map.insert(id.to_string(), s.clone());
                Ok(s)
            }
            None => Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no session {id}"))),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        ApiError { status, body: json!({ "error": message.into(), "kind": kind }) }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::BlockFull { level, row, col } => ApiError {
                status: StatusCode::CONFLICT,
                body: json!({ "error": msg, "kind": "slot_full", "level": level, "block": [row, col] }),
            },
            CoreError::InvalidStroke(_)
            | CoreError::InvalidArgument(_)
            | CoreError::UnknownClass { .. }
            | CoreError::NonFinite(_)
            | CoreError::LengthMismatch { .. } => Self::new(StatusCode::BAD_REQUEST, "invalid", msg),
            _ => Self::internal(msg),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn sequence_json(seq: &StrokeSequence) -> ApiResult<Value> {
    serde_json::from_str(&seq.to_json()?).map_err(|e| ApiError::internal(e.to_string()))
}

fn state_json(s: &Session) -> ApiResult<Value> {
    Ok(json!({
        "id": s.id,
        "class": s.class.id(),
        "state_version": s.version,
        "history_len": s.history.len(),
        "occupied": s.seq.occupied_count(),
        "pending_variants": s.pending_variants().map_or(0, |v| v.len()),
        "created": s.created,
        "updated": s.updated,
        "sequence": sequence_json(&s.seq)?,
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/classes", get(classes))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/strokes", post(add_stroke))
        .route("/v1/sessions/{id}/erase", post(erase))
        .route("/v1/sessions/{id}/undo", post(undo))
        .route("/v1/sessions/{id}/complete", post(complete))
        .route("/v1/sessions/{id}/accept", post(accept))
        .route("/v1/sessions/{id}/render.png", get(render))
        .route("/v1/sessions/{id}/stream", get(stream))
        .with_state(state)
}

async fn classes(State(app): State<Arc<AppState>>) -> Json<Value> {
    let list: Vec<Value> = app.class_names.iter().enumerate().map(|(id, name)| json!({ "id": id, "name": name })).collect();
    Json(json!({ "classes": list }))
}

#[derive(Debug, Default, Deserialize)]
struct CreateBody {
    class: Option<usize>,
}

async fn create_session(State(app): State<Arc<AppState>>, body: Option<Json<CreateBody>>) -> ApiResult<Json<Value>> {
    let class = ClassLabel::from(body.map(|b| b.0).unwrap_or_default().class);
    class.check(app.model.config.num_classes)?;
    let id = uuid::Uuid::new_v4().to_string();
    let session = Session::new(id.clone(), app.grid, class);
    app.persist(&session)?;
    app.notify(&session, "created");
    app.sessions.lock().await.insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok(Json(json!({ "id": id })))
}

async fn get_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let s = app.session(&id).await?;
    let s = s.lock().await;
    Ok(Json(state_json(&s)?))
}

#[derive(Debug, Deserialize)]
struct StrokeBody {
    stroke: [f32; 8],
}

async fn add_stroke(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<StrokeBody>,
) -> ApiResult<Json<Value>> {
    let stroke = Stroke::from_array(body.stroke);
    stroke.validate()?;
    let s = app.session(&id).await?;
    let mut s = s.lock().await;
    let loc = s.add_stroke(stroke)?;
    app.persist(&s)?;
    app.notify(&s, "stroke_added");
    Ok(Json(json!({
        "level": loc.level,
        "block": [loc.block.0, loc.block.1],
        "slot": loc.slot,
        "state_version": s.version,
    })))
}

#[derive(Debug, Deserialize)]
struct EraseBody {
    cx: f32,
    cy: f32,
    side: Option<f32>,
}

async fn erase(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<EraseBody>,
) -> ApiResult<Json<Value>> {
    let s = app.session(&id).await?;
    let mut s = s.lock().await;
    let erased = s.erase_square(body.cx, body.cy, body.side.unwrap_or(DEFAULT_ERASE_SIDE))?;
    app.persist(&s)?;
    app.notify(&s, "erased");
    Ok(Json(json!({ "erased": erased, "state_version": s.version })))
}

#[derive(Debug, Deserialize)]
struct UndoBody {
    n: Option<usize>,
}

async fn undo(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<UndoBody>,
) -> ApiResult<Json<Value>> {
    let s = app.session(&id).await?;
    let mut s = s.lock().await;
    s.undo(body.n.unwrap_or(1))?;
    app.persist(&s)?;
    app.notify(&s, "undone");
    Ok(Json(json!({ "history_len": s.history.len(), "state_version": s.version })))
}

#[derive(Debug, Deserialize)]
struct CompleteBody {
    n_variants: Option<usize>,
    steps: Option<usize>,
    s1: Option<f64>,
    s2: Option<f64>,
    seed: Option<u64>,
}

async fn complete(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<CompleteBody>,
) -> ApiResult<Json<Value>> {
    let d = CompleteParams::default();
    let params = CompleteParams {
        n_variants: body.n_variants.unwrap_or(d.n_variants),
        steps: body.steps.unwrap_or(d.steps),
        s1: body.s1.unwrap_or(d.s1),
        s2: body.s2.unwrap_or(d.s2),
        seed: body.seed.unwrap_or(d.seed),
    };
    params.validate()?;
    let handle = app.session(&id).await?;
    let (seq, class, version) = {
        let s = handle.lock().await;
        (s.seq.clone(), s.class, s.version)
    };
    let permit = app.samplers.acquire().await.map_err(|e| ApiError::internal(e.to_string()))?;
    let (model, schedule) = (app.model.clone(), app.schedule);
    let started = std::time::Instant::now();
    let variants = tokio::task::spawn_blocking(move || complete_variants(model.as_ref(), &schedule, &seq, class, &params))
        .await
        .map_err(|e| ApiError::internal(format!("sampler task failed: {e}")))??;
    drop(permit);
    log::info!("session {id}: {} variants x {} steps in {:?}", params.n_variants, params.steps, started.elapsed());

    let mut s = handle.lock().await;
    if s.version != version {
        return Err(ApiError::new(StatusCode::CONFLICT, "stale", "session changed while sampling; request again"));
    }
    let body: Vec<Value> = variants.iter().map(sequence_json).collect::<ApiResult<_>>()?;
    s.set_pending(version, params, variants)?;
    app.notify(&s, "variants_ready");
    Ok(Json(json!({ "variants": body, "state_version": s.version })))
}

#[derive(Debug, Deserialize)]
struct AcceptBody {
    index: usize,
}

async fn accept(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<AcceptBody>,
) -> ApiResult<Json<Value>> {
    let s = app.session(&id).await?;
    let mut s = s.lock().await;
    s.accept_variant(body.index).map_err(|e| match e {
        CoreError::InvalidArgument(m) => ApiError::new(StatusCode::CONFLICT, "no_such_variant", m),
        other => other.into(),
    })?;
    app.persist(&s)?;
    app.notify(&s, "accepted");
    Ok(Json(json!({ "state_version": s.version })))
}

#[derive(Debug, Deserialize)]
struct RenderQuery {
    size: Option<usize>,
}

async fn render(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<RenderQuery>,
) -> ApiResult<Response> {
    let s = app.session(&id).await?;
    let seq_session = s.lock().await.clone();
    let size = q.size.unwrap_or(DEFAULT_RENDER_SIZE);
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, CoreError> { encode_png(&seq_session.render(size)?) })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn stream(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let handle = app.session(&id).await?;
    let version = handle.lock().await.version;
    let rx = app.subscribe();
    Ok(ws.on_upgrade(move |socket| forward_events(socket, id, version, rx)))
}

async fn forward_events(mut socket: WebSocket, id: String, version: u64, mut rx: broadcast::Receiver<Event>) {
    let hello = Event { session: id.clone(), event: "sync".into(), state_version: version };
    if socket.send(Message::Text(serde_json::to_string(&hello).unwrap_or_default().into())).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            ev = rx.recv() => match ev {
                Ok(ev) if ev.session == id => {
                    let text = serde_json::to_string(&ev).unwrap_or_default();
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        return;
                    }
                }
                Ok(_) => {}
                Err(broadcast::error::RecvError::Lagged(_)) => {}
                Err(broadcast::error::RecvError::Closed) => return,
            },
            msg = socket.recv() => match msg {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                _ => {}
            },
        }
    }
}

/// Serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
