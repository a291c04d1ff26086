//! HTTP API for curating inferred assembly graphs.
//!
//! | method | path | |
//! |---|---|---|
//! | `GET` | `/health` | liveness |
//! | `POST` | `/graphs` | multipart upload of patch PNGs or one graph document; runs inference |
//! | `GET` | `/graphs` | session ids |
//! | `GET` | `/graphs/{id}?tau=` | current view with layout, as a graph document |
//! | `DELETE` | `/graphs/{id}` | drop a session |
//! | `PUT` | `/graphs/{id}/tau` | `{"tau": 0.8}` sets the session threshold |
//! | `GET` | `/graphs/{id}/edits` | threshold and edit log |
//! | `POST` | `/graphs/{id}/edits` | `{"op": "delete_edge", "source": 4, "target": 9}` |
//! | `POST` | `/graphs/{id}/undo` | pops the last edit |
//! | `GET` | `/graphs/{id}/patches/{node}.png` | patch pixels |
//!
//! Views are pure functions of the uploaded graph, the threshold and the edit
//! log, and session ids are sequential, so replaying the same requests on a
//! fresh server yields byte-identical responses.

mod session;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use patchgraph::assembly::{infer, EdgeClassifier};
use patchgraph::dataset::patches_from_named_images;
use patchgraph::graph::{complete_graph, AssemblyGraph, EdgeFeatures};
use patchgraph::graphio::{from_json_str, to_json_string, PatchStorage};
use patchgraph::raster::{patch_image, RgbImage};
use serde::{Deserialize, Serialize};

pub use session::{check_tau, Edit, Session};

/// Largest accepted request body.
pub const BODY_LIMIT: usize = 512 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    /// Required side length of uploaded patches.
    pub patch_size: usize,
    /// Threshold of new sessions.
    pub default_tau: f32,
    /// Sessions are restored from and saved to this file.
    pub snapshot: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            patch_size: 256,
            default_tau: 0.8,
            snapshot: None,
        }
    }
}

/// Error carrying an HTTP status; rendered as `{"error": message}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }
}

impl From<patchgraph::Error> for ApiError {
    fn from(e: patchgraph::Error) -> Self {
        use patchgraph::Error as E;
        let status = match e {
            E::DegenerateGraph(_) => StatusCode::UNPROCESSABLE_ENTITY,
            E::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Inner {
    config: ServiceConfig,
    classifier: Option<Arc<dyn EdgeClassifier>>,
    sessions: RwLock<BTreeMap<String, Arc<RwLock<Session>>>>,
    next_id: AtomicU64,
    /// At most one inference runs at a time.
    inference: tokio::sync::Mutex<()>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    next_id: u64,
    sessions: Vec<SessionSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct SessionSnapshot {
    id: String,
    tau: f32,
    log: Vec<Edit>,
    base: serde_json::Value,
}

impl AppState {
    /// `classifier` is used for uploads that need inference; without one
    /// such uploads are answered with 503.
    pub fn new(config: ServiceConfig, classifier: Option<Arc<dyn EdgeClassifier>>) -> Self {
        AppState {
            inner: Arc::new(Inner {
                config,
                classifier,
                sessions: RwLock::new(BTreeMap::new()),
                next_id: AtomicU64::new(1),
                inference: tokio::sync::Mutex::new(()),
            }),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.inner.sessions.read().unwrap().keys().cloned().collect()
    }

    fn session(&self, id: &str) -> ApiResult<Arc<RwLock<Session>>> {
        self.inner
            .sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no graph {id}")))
    }

    /// Stores an inferred graph as a new session.
    pub fn insert(&self, base: AssemblyGraph) -> String {
        let id = format!("g{}", self.inner.next_id.fetch_add(1, Ordering::SeqCst));
        let session = Session::new(id.clone(), base, self.inner.config.default_tau);
        self.inner
            .sessions
            .write()
            .unwrap()
            .insert(id.clone(), Arc::new(RwLock::new(session)));
        id
    }

    /// All sessions as one JSON document.
    pub fn snapshot_json(&self) -> ApiResult<String> {
        let sessions = self.inner.sessions.read().unwrap();
        let mut out = Vec::with_capacity(sessions.len());
        for s in sessions.values() {
            let s = s.read().unwrap();
            let base = to_json_string(&s.base, None, &PatchStorage::Embedded, None)?;
            out.push(SessionSnapshot {
                id: s.id.clone(),
                tau: s.tau,
                log: s.log.clone(),
                base: serde_json::from_str(&base).expect("graph documents are JSON"),
            });
        }
        let snap = Snapshot {
            next_id: self.inner.next_id.load(Ordering::SeqCst),
            sessions: out,
        };
        Ok(serde_json::to_string(&snap).expect("snapshot serializes"))
    }

    pub fn restore_json(&self, text: &str) -> ApiResult<()> {
        let snap: Snapshot = serde_json::from_str(text).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let mut sessions = self.inner.sessions.write().unwrap();
        for s in snap.sessions {
            let (base, _) = from_json_str(&s.base.to_string(), None)?;
            let session = Session {
                id: s.id.clone(),
                base,
                tau: check_tau(s.tau)?,
                log: s.log,
            };
            sessions.insert(s.id, Arc::new(RwLock::new(session)));
        }
        self.inner.next_id.fetch_max(snap.next_id, Ordering::SeqCst);
        Ok(())
    }

    pub fn save_snapshot(&self) -> std::io::Result<()> {
        match &self.inner.config.snapshot {
            Some(path) => {
                let text = self.snapshot_json().map_err(|e| std::io::Error::other(e.message))?;
                std::fs::write(path, text)
            }
            None => Ok(()),
        }
    }

    pub fn load_snapshot(&self) -> std::io::Result<()> {
        match &self.inner.config.snapshot {
            Some(path) if path.exists() => {
                let text = std::fs::read_to_string(path)?;
                self.restore_json(&text)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.message))
            }
            _ => Ok(()),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/graphs", post(upload).get(list))
        .route("/graphs/{id}", get(view).delete(remove))
        .route("/graphs/{id}/tau", put(set_tau))
        .route("/graphs/{id}/edits", post(edit).get(edit_log))
        .route("/graphs/{id}/undo", post(undo))
        .route("/graphs/{id}/patches/{file}", get(patch_png))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Serves until Ctrl-C, then writes the session snapshot.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    state.load_snapshot()?;
    let app = router(state.clone()).into_make_service_with_connect_info::<SocketAddr>();
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    state.save_snapshot()
}

fn json_response(status: StatusCode, body: String, tau: Option<f32>) -> Response {
    let mut resp = (status, [(header::CONTENT_TYPE, "application/json")], body).into_response();
    if let Some(t) = tau {
        resp.headers_mut()
            .insert("x-tau", HeaderValue::from_str(&t.to_string()).expect("floats are valid headers"));
    }
    resp
}

#[derive(Serialize)]
struct Created {
    graph_id: String,
    nodes: usize,
    edges: usize,
}

enum Upload {
    Patches(Vec<(String, RgbImage)>),
    Document(String),
}

async fn read_upload(mut form: Multipart) -> ApiResult<Upload> {
    let mut images = Vec::new();
    let mut document = None;
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.to_string()))?
    {
        let name = field
            .file_name()
            .or(field.name())
            .unwrap_or_default()
            .to_string();
        let is_doc = name.ends_with(".json") || field.name() == Some("graph");
        let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
        if is_doc {
            if document.is_some() {
                return Err(ApiError::bad_request("more than one graph document"));
            }
            document = Some(String::from_utf8(bytes.to_vec()).map_err(|e| ApiError::bad_request(e.to_string()))?);
        } else {
            let img = RgbImage::decode_png(&bytes).map_err(|e| ApiError::bad_request(format!("{name}: {e}")))?;
            images.push((name, img));
        }
    }
    match (document, images.is_empty()) {
        (Some(doc), true) => Ok(Upload::Document(doc)),
        (Some(_), false) => Err(ApiError::bad_request("send either patches or one graph document")),
        (None, _) => Ok(Upload::Patches(images)),
    }
}

async fn upload(State(state): State<AppState>, form: Multipart) -> ApiResult<Response> {
    let size = state.inner.config.patch_size;
    let graph = match read_upload(form).await? {
        Upload::Patches(images) => {
            if let Some((name, img)) = images.iter().find(|(_, i)| i.width() != size || i.height() != size) {
                return Err(ApiError::bad_request(format!(
                    "{name} is {}x{}, expected {size}x{size}",
                    img.width(),
                    img.height()
                )));
            }
            if images.len() < 2 {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("need at least 2 patches, got {}", images.len()),
                ));
            }
            complete_graph(patches_from_named_images(images)?)?
        }
        Upload::Document(text) => {
            let (g, _) = from_json_str(&text, None)?;
            if g.patch_size() != size {
                return Err(ApiError::bad_request(format!(
                    "graph patches are {}px, expected {size}px",
                    g.patch_size()
                )));
            }
            g
        }
    };
    let inferred = if graph.features() == EdgeFeatures::Probabilities && graph.predicted().is_some() {
        graph
    } else {
        let classifier = state
            .inner
            .classifier
            .clone()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no checkpoint loaded"))?;
        let _turn = state.inner.inference.lock().await;
        tokio::task::spawn_blocking(move || infer(&graph, classifier.as_ref()))
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??
    };
    let (nodes, edges) = (inferred.node_count(), inferred.edge_count());
    let graph_id = state.insert(inferred);
    let body = serde_json::to_string(&Created { graph_id, nodes, edges }).expect("serializes");
    Ok(json_response(StatusCode::CREATED, body, None))
}

async fn list(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "graphs": state.session_ids() }))
}

#[derive(Deserialize)]
struct TauQuery {
    tau: Option<f32>,
}

fn render_view(session: &Session, tau: Option<f32>) -> ApiResult<Response> {
    let body = session.view_json(tau)?;
    Ok(json_response(StatusCode::OK, body, Some(tau.unwrap_or(session.tau))))
}

async fn view(State(state): State<AppState>, Path(id): Path<String>, Query(q): Query<TauQuery>) -> ApiResult<Response> {
    let s = state.session(&id)?;
    let s = s.read().unwrap();
    render_view(&s, q.tau)
}

async fn remove(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    state
        .inner
        .sessions
        .write()
        .unwrap()
        .remove(&id)
        .map(|_| StatusCode::NO_CONTENT)
        .ok_or_else(|| ApiError::not_found(format!("no graph {id}")))
}

#[derive(Deserialize)]
struct TauBody {
    tau: f32,
}

async fn set_tau(State(state): State<AppState>, Path(id): Path<String>, Json(body): Json<TauBody>) -> ApiResult<Response> {
    let s = state.session(&id)?;
    let mut s = s.write().unwrap();
    s.set_tau(body.tau)?;
    render_view(&s, None)
}

async fn edit(State(state): State<AppState>, Path(id): Path<String>, Json(edit): Json<Edit>) -> ApiResult<Response> {
    let s = state.session(&id)?;
    let mut s = s.write().unwrap();
    s.apply(edit)?;
    render_view(&s, None)
}

async fn edit_log(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let s = state.session(&id)?;
    let s = s.read().unwrap();
    Ok(Json(serde_json::json!({ "tau": s.tau, "log": s.log })))
}

async fn undo(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = state.session(&id)?;
    let mut s = s.write().unwrap();
    s.undo()?;
    render_view(&s, None)
}

async fn patch_png(State(state): State<AppState>, Path((id, file)): Path<(String, String)>) -> ApiResult<Response> {
    let node: usize = file
        .strip_suffix(".png")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| ApiError::not_found(format!("no patch {file}")))?;
    let s = state.session(&id)?;
    let png = {
        let s = s.read().unwrap();
        let p = s
            .base
            .node(node)
            .ok_or_else(|| ApiError::not_found(format!("no node {node} in {id}")))?;
        patch_image(p).encode_png()?
    };
    Ok((StatusCode::OK, [(header::CONTENT_TYPE, "image/png")], png).into_response())
}
