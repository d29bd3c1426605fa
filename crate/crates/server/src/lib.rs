//! JSON-over-HTTP recommendation service.
//!
//! `GET /v1/health`, `POST /v1/bundles` and `POST /v1/recommend`. Scores in
//! recommend responses are raw inner products between the final hidden
//! state and the item vectors; no softmax is applied.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use e4srec_core::servekit::{Registry, ServeError};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server stopped: {0}")]
    Serve(std::io::Error),
}

#[derive(Debug, Deserialize)]
pub struct LoadRequest {
    pub dataset_id: String,
    pub path: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LoadResponse {
    pub loaded: bool,
    pub dataset_id: String,
    pub version: u64,
}

#[derive(Debug, Deserialize)]
pub struct RecommendRequest {
    pub dataset_id: String,
    pub item_ids: Vec<usize>,
    pub k: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RecommendResponse {
    pub items: Vec<usize>,
    pub scores: Vec<f32>,
    pub version: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub datasets: Vec<String>,
}

/// Body of every non-2xx response.
#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub unknown_ids: Option<Vec<usize>>,
}

struct ApiError(StatusCode, ErrorBody);

impl From<ServeError> for ApiError {
    fn from(e: ServeError) -> Self {
        let (status, kind, ids) = match &e {
            ServeError::UnknownDataset(_) => (StatusCode::NOT_FOUND, "unknown_dataset", None),
            ServeError::UnknownItems { ids, .. } => (StatusCode::BAD_REQUEST, "unknown_items", Some(ids.clone())),
            ServeError::Invalid(_) => (StatusCode::BAD_REQUEST, "invalid_request", None),
            ServeError::Io { .. } => (StatusCode::BAD_REQUEST, "io", None),
            ServeError::Checksum { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "corrupt_bundle", None),
            ServeError::Format(_) => (StatusCode::UNPROCESSABLE_ENTITY, "malformed_bundle", None),
            ServeError::Incompatible { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "incompatible_bundle", None),
        };
        ApiError(status, ErrorBody { error: kind.into(), message: e.to_string(), unknown_ids: ids })
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(e.status(), ErrorBody { error: "bad_json".into(), message: e.body_text(), unknown_ids: None })
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

pub fn app(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/bundles", post(load_bundle))
        .route("/v1/recommend", post(recommend))
        .with_state(registry)
}

async fn health(State(reg): State<Arc<Registry>>) -> Json<HealthResponse> {
    Json(HealthResponse { status: "ok".into(), datasets: reg.datasets() })
}

async fn load_bundle(
    State(reg): State<Arc<Registry>>,
    body: Result<Json<LoadRequest>, JsonRejection>,
) -> Result<Json<LoadResponse>, ApiError> {
    let Json(req) = body?;
    let LoadRequest { dataset_id, path } = req;
    let id = dataset_id.clone();
    let version = blocking(move || reg.load(&id, &path)).await?;
    log::info!("loaded bundle for {dataset_id} as version {version}");
    Ok(Json(LoadResponse { loaded: true, dataset_id, version }))
}

async fn recommend(
    State(reg): State<Arc<Registry>>,
    body: Result<Json<RecommendRequest>, JsonRejection>,
) -> Result<Json<RecommendResponse>, ApiError> {
    let Json(req) = body?;
    let rec = blocking(move || reg.recommend(&req.dataset_id, &req.item_ids, req.k)).await?;
    Ok(Json(RecommendResponse { items: rec.items, scores: rec.scores, version: rec.version }))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServeError> + Send + 'static) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError(
            StatusCode::INTERNAL_SERVER_ERROR,
            ErrorBody { error: "internal".into(), message: e.to_string(), unknown_ids: None },
        )),
    }
}

pub async fn bind(addr: &str) -> Result<TcpListener, ServerError> {
    TcpListener::bind(addr).await.map_err(|source| ServerError::Bind { addr: addr.to_string(), source })
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    registry: Arc<Registry>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServerError> {
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    if let Some(addr) = addr {
        log::info!("listening on {addr}");
    }
    axum::serve(listener, app(registry)).with_graceful_shutdown(shutdown).await.map_err(ServerError::Serve)
}
