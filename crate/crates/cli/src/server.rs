//! HTTP API over a [`ReviewStore`]. Reads take a per-frame shared lock and
//! writes an exclusive one, so writes to one frame are serialized while
//! different frames proceed independently.

use crate::review::{MaskUpdate, ReviewError, ReviewStore};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use tokio::net::TcpListener;
use tokio::sync::RwLock;

pub struct ReviewService {
    store: ReviewStore,
    locks: HashMap<String, Arc<RwLock<()>>>,
}

impl ReviewService {
    pub fn new(store: ReviewStore) -> Self {
        let locks = store
            .frame_ids()
            .map(|id| (id.to_string(), Arc::new(RwLock::new(()))))
            .collect();
        Self { store, locks }
    }

    fn lock(&self, id: &str) -> Result<Arc<RwLock<()>>, ReviewError> {
        self.locks
            .get(id)
            .cloned()
            .ok_or_else(|| ReviewError::UnknownFrame(id.to_string()))
    }
}

type Shared = Arc<ReviewService>;

struct ApiError(ReviewError);

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let code = match &self.0 {
            ReviewError::Conflict { current } => {
                return (
                    StatusCode::CONFLICT,
                    Json(json!({ "revision": current, "error": self.0.to_string() })),
                )
                    .into_response()
            }
            ReviewError::UnknownFrame(_) | ReviewError::UnknownMask { .. } => StatusCode::NOT_FOUND,
            ReviewError::InvalidTransition { .. }
            | ReviewError::BadMask(_)
            | ReviewError::NotHeight(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (code, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

/// Runs blocking store work off the async executor.
async fn blocking<T: Send + 'static>(
    svc: &Shared,
    f: impl FnOnce(&ReviewStore) -> Result<T, ReviewError> + Send + 'static,
) -> Result<T, ApiError> {
    let svc = svc.clone();
    tokio::task::spawn_blocking(move || f(&svc.store))
        .await
        .map_err(|e| ApiError(ReviewError::Io(std::io::Error::other(e))))?
        .map_err(ApiError)
}

async fn list_frames(State(svc): State<Shared>) -> Result<Response, ApiError> {
    let frames = blocking(&svc, |s| s.list_frames()).await?;
    Ok(Json(frames).into_response())
}

#[derive(Deserialize)]
struct PreviewQuery {
    mask: Option<usize>,
}

async fn frame_image(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<PreviewQuery>,
) -> Result<Response, ApiError> {
    let lock = svc.lock(&id)?;
    let _g = lock.read().await;
    let png = blocking(&svc, move |s| s.preview_png(&id, q.mask)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn get_mask(
    State(svc): State<Shared>,
    Path((id, k)): Path<(String, usize)>,
) -> Result<Response, ApiError> {
    let lock = svc.lock(&id)?;
    let _g = lock.read().await;
    let view = blocking(&svc, move |s| s.get_mask(&id, k)).await?;
    Ok(Json(view).into_response())
}

async fn put_mask(
    State(svc): State<Shared>,
    Path((id, k)): Path<(String, usize)>,
    Json(update): Json<MaskUpdate>,
) -> Result<Response, ApiError> {
    let lock = svc.lock(&id)?;
    let _g = lock.write().await;
    let revision = blocking(&svc, move |s| s.put_mask(&id, k, &update)).await?;
    Ok(Json(json!({ "revision": revision })).into_response())
}

async fn physics_check(
    State(svc): State<Shared>,
    Path((id, k)): Path<(String, usize)>,
) -> Result<Response, ApiError> {
    let lock = svc.lock(&id)?;
    let _g = lock.read().await;
    let check = blocking(&svc, move |s| s.physics_check(&id, k)).await?;
    Ok(Json(check).into_response())
}

/// API routes, plus static files from `ui_dir` for everything else.
pub fn router(service: ReviewService, ui_dir: Option<&std::path::Path>) -> Router {
    let api = Router::new()
        .route("/api/frames", get(list_frames))
        .route("/api/frames/{id}/image.png", get(frame_image))
        .route("/api/frames/{id}/masks/{k}", get(get_mask).put(put_mask))
        .route(
            "/api/frames/{id}/masks/{k}/physics-check",
            post(physics_check),
        )
        .with_state(Arc::new(service));
    match ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Locks the dataset and binds `addr`.
pub async fn bind_review(
    dataset: &std::path::Path,
    addr: SocketAddr,
    ui_dir: Option<&std::path::Path>,
) -> Result<(TcpListener, Router), ReviewError> {
    let store = ReviewStore::open(dataset)?;
    let listener = match TcpListener::bind(addr).await {
        Ok(l) => l,
        Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => {
            return Err(ReviewError::PortInUse(addr.port()))
        }
        Err(e) => return Err(e.into()),
    };
    Ok((listener, router(ReviewService::new(store), ui_dir)))
}
