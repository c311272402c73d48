//! HTTP front of the review task store.
//!
//! | route | result |
//! |---|---|
//! | `GET /tasks/next?reviewer=R` | 200 task, 204 when nothing is open |
//! | `POST /decisions` | 201 stored decision; 404, 409 or 422 |
//! | `GET /progress` | `{open, decided, accept_rate}` |
//! | `GET /images/<path>` | PNG from the staging root |
//! | `GET /` | the UI bundle, when one is configured |

use std::collections::HashMap;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use densescan::reviewsvc::{DecisionRequest, ReviewError, TaskStore};
use serde_json::json;
use tower_http::services::ServeDir;

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    })
}

#[derive(Clone)]
pub struct AppState {
    store: Arc<Mutex<TaskStore>>,
    images_root: PathBuf,
    clock: Clock,
}

impl AppState {
    pub fn new(store: TaskStore, images_root: impl Into<PathBuf>) -> AppState {
        AppState {
            store: Arc::new(Mutex::new(store)),
            images_root: images_root.into(),
            clock: system_clock(),
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> AppState {
        self.clock = clock;
        self
    }
}

pub fn router(state: AppState, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/tasks/next", get(next_task))
        .route("/decisions", post(post_decision))
        .route("/progress", get(progress))
        .route("/images/{*path}", get(image))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(include_str!("../assets/index.html")) })),
    }
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app).await
}

fn error(status: StatusCode, msg: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": msg.to_string() }))).into_response()
}

async fn next_task(State(st): State<AppState>, Query(q): Query<HashMap<String, String>>) -> Response {
    let Some(reviewer) = q.get("reviewer").filter(|r| !r.trim().is_empty()) else {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "missing reviewer");
    };
    let now = (st.clock)();
    let task = st.store.lock().expect("store lock").next_task(reviewer, now);
    match task {
        Some(t) => Json(t).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn post_decision(State(st): State<AppState>, body: Bytes) -> Response {
    let req: DecisionRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e),
    };
    let now = (st.clock)();
    let result = st.store.lock().expect("store lock").decide(req, now);
    match result {
        Ok(d) => (StatusCode::CREATED, Json(d)).into_response(),
        Err(e @ ReviewError::UnknownTask(_)) => error(StatusCode::NOT_FOUND, e),
        Err(e @ ReviewError::AlreadyDecided { .. }) => error(StatusCode::CONFLICT, e),
        Err(e @ ReviewError::InvalidDecision(_)) => error(StatusCode::UNPROCESSABLE_ENTITY, e),
        Err(e) => {
            log::error!("decision not stored: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, e)
        }
    }
}

async fn progress(State(st): State<AppState>) -> Response {
    let p = st.store.lock().expect("store lock").progress();
    Json(p).into_response()
}

/// Relative paths made only of plain components, ending in `.png`.
pub fn safe_image_path(root: &Path, rel: &str) -> Option<PathBuf> {
    let rel = Path::new(rel);
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return None;
    }
    if rel.extension().and_then(|e| e.to_str()) != Some("png") {
        return None;
    }
    Some(root.join(rel))
}

async fn image(State(st): State<AppState>, UrlPath(rel): UrlPath<String>) -> Response {
    let Some(path) = safe_image_path(&st.images_root, &rel) else {
        return error(StatusCode::NOT_FOUND, "no such image");
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, "no such image"),
    }
}
