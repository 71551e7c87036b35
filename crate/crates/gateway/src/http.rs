use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::Serialize;
use tokio::sync::oneshot;

use crate::error::GatewayError;
use crate::hub::Gateway;
use crate::wire::{LabelsFile, NewClassRequest};

const PLACEHOLDER_PAGE: &str = "<!doctype html><title>labelling gateway</title>\
<p>No UI assets installed. Sessions are served at <code>/api/session/current</code>.</p>";

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub missing_query_ids: Vec<u64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub unknown_label_ids: Vec<usize>,
}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let status = match &self {
            GatewayError::NotFound(_) => StatusCode::NOT_FOUND,
            GatewayError::SessionOpen { .. } | GatewayError::AlreadyComplete(_) => StatusCode::CONFLICT,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        let body = ErrorBody {
            error: self.to_string(),
            missing_query_ids: match &self {
                GatewayError::MissingLabels(ids) => ids.clone(),
                _ => Vec::new(),
            },
            unknown_label_ids: match &self {
                GatewayError::UnknownLabels(ids) => ids.clone(),
                _ => Vec::new(),
            },
        };
        (status, Json(body)).into_response()
    }
}

type Shared = State<Arc<Gateway>>;

/// 204 while no session is waiting for labels.
async fn current_session(State(gw): Shared) -> Response {
    match gw.current_session() {
        Some(s) => Json(s).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn session(State(gw): Shared, Path(id): Path<u64>) -> Result<Response, GatewayError> {
    Ok(Json(gw.get_session(id)?).into_response())
}

async fn submit(State(gw): Shared, Path(id): Path<u64>, Json(labels): Json<LabelsFile>) -> Result<Response, GatewayError> {
    Ok(Json(gw.submit_labels(id, &labels)?).into_response())
}

async fn status(State(gw): Shared) -> Response {
    Json(gw.status()).into_response()
}

async fn classes(State(gw): Shared) -> Response {
    Json(gw.classes()).into_response()
}

async fn add_class(State(gw): Shared, Json(req): Json<NewClassRequest>) -> Result<Response, GatewayError> {
    Ok((StatusCode::CREATED, Json(gw.add_class(&req.name)?)).into_response())
}

/// API routes plus static assets from `assets` (or a placeholder page) at `/`.
pub fn router(gateway: Arc<Gateway>, assets: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/session/current", get(current_session))
        .route("/api/session/{id}", get(session))
        .route("/api/session/{id}/labels", axum::routing::post(submit))
        .route("/api/status", get(status))
        .route("/api/classes", get(classes).post(add_class))
        .with_state(gateway);
    match assets {
        Some(dir) => api.fallback(move |uri: Uri| asset(dir.clone(), uri)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER_PAGE) })),
    }
}

fn content_type(path: &std::path::Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript; charset=utf-8",
        Some("css") => "text/css; charset=utf-8",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

async fn asset(root: PathBuf, uri: Uri) -> Response {
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    if rel.split('/').any(|part| part == ".." || part.starts_with('.')) {
        return StatusCode::NOT_FOUND.into_response();
    }
    let path = root.join(rel);
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

/// A server running on its own thread; dropping it shuts the server down.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Err(e) = self.stop() {
            log::warn!("gateway shutdown: {e}");
        }
    }
}

/// Binds `addr` (port 0 picks a free one) and serves until the handle is
/// dropped.
pub fn spawn(gateway: Arc<Gateway>, addr: SocketAddr, assets: Option<PathBuf>) -> std::io::Result<ServerHandle> {
    let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(gateway, assets);
    let thread = std::thread::Builder::new().name("gateway".into()).spawn(move || {
        runtime.block_on(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    })?;
    log::info!("gateway listening on http://{addr}");
    Ok(ServerHandle { addr, shutdown: Some(tx), thread: Some(thread) })
}
