//! HTTP facade over the engine with file-backed persistence.
//!
//! All routes live under `/v1`. Mutating requests may carry an
//! `Idempotency-Key` (or `X-Request-Id`) header; a retry with the same key,
//! method and path replays the first response instead of redoing the work.

mod api;
pub mod error;
pub mod store;

pub use api::{GraphEnvelope, JobRecord, JobStatus, ReportEnvelope, RunEnvelope};
pub use error::{ApiError, ErrorBody};
pub use store::{ArtifactKind, Index, IndexEntry, RunStore};

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::Router;
use serde_json::{json, Value};
use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use tokio::sync::{Mutex, Semaphore};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use whatif_core::Gateway;

const MAX_BODY: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub store_root: PathBuf,
    /// Static bearer token; `None` disables the check.
    pub token: Option<String>,
    /// Allowed browser origin; `None` allows any.
    pub cors_origin: Option<String>,
    /// Run extraction jobs inside the request instead of in the background.
    pub sync_jobs: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            store_root: PathBuf::from("whatif-store"),
            token: None,
            cors_origin: None,
            sync_jobs: false,
        }
    }
}

#[derive(Debug, Clone)]
struct CachedResponse {
    body_hash: String,
    status: StatusCode,
    content_type: Option<HeaderValue>,
    body: Bytes,
}

type IdempotencyKey = (String, String, String);

pub(crate) struct Inner {
    pub(crate) store: RunStore,
    pub(crate) gateway: Gateway,
    pub(crate) config: ServiceConfig,
    pub(crate) workers: Arc<Semaphore>,
    replies: Mutex<HashMap<IdempotencyKey, Arc<Mutex<Option<CachedResponse>>>>>,
}

/// Shared handle passed to every handler.
#[derive(Clone)]
pub struct AppState(pub(crate) Arc<Inner>);

impl AppState {
    pub fn new(config: ServiceConfig, gateway: Gateway) -> std::io::Result<Self> {
        let store = RunStore::open(&config.store_root)?;
        let workers = Arc::new(Semaphore::new(gateway.options().concurrency.max(1)));
        Ok(Self(Arc::new(Inner { store, gateway, config, workers, replies: Mutex::new(HashMap::new()) })))
    }

    pub fn store(&self) -> &RunStore {
        &self.0.store
    }

    pub fn gateway(&self) -> &Gateway {
        &self.0.gateway
    }

    /// Provider settings recorded with every artifact.
    pub(crate) fn config_snapshot(&self) -> Value {
        let o = self.0.gateway.options();
        json!({
            "provider": self.0.gateway.provider_name(),
            "chat_model": o.chat_model,
            "embedding_model": o.embedding_model,
            "max_refinements": o.max_refinements,
            "inference_temperature": o.inference_temperature,
            "extraction_temperature": o.extraction_temperature,
        })
    }
}

pub fn router(state: AppState) -> Router {
    let cors = match &state.0.config.cors_origin {
        Some(origin) => match HeaderValue::from_str(origin) {
            Ok(v) => CorsLayer::new().allow_origin(AllowOrigin::exact(v)),
            Err(_) => {
                log::warn!("ignoring invalid CORS origin `{origin}`");
                CorsLayer::new()
            }
        },
        None => CorsLayer::new().allow_origin(Any),
    }
    .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
    .allow_headers([
        header::AUTHORIZATION,
        header::CONTENT_TYPE,
        header::HeaderName::from_static("idempotency-key"),
        header::HeaderName::from_static("x-request-id"),
    ]);

    Router::new()
        .nest("/v1", api::routes())
        .layer(middleware::from_fn_with_state(state.clone(), idempotency))
        .layer(middleware::from_fn_with_state(state.clone(), authorize))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .layer(cors)
        .with_state(state)
}

async fn authorize(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let Some(token) = &state.0.config.token else { return next.run(req).await };
    if req.uri().path() == "/v1/health" || req.method() == Method::OPTIONS {
        return next.run(req).await;
    }
    let given = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given == Some(token.as_str()) {
        next.run(req).await
    } else {
        ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response()
    }
}

fn request_key(req: &Request) -> Option<String> {
    ["idempotency-key", "x-request-id"]
        .iter()
        .find_map(|h| req.headers().get(*h))
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
        .filter(|k| !k.is_empty())
}

/// Replays the stored response for a repeated key. Server errors are not
/// cached so that a retry after a provider outage does the work again.
async fn idempotency(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if req.method() != Method::POST {
        return next.run(req).await;
    }
    let Some(key) = request_key(&req) else { return next.run(req).await };
    let slot_key = (key, req.method().to_string(), req.uri().path().to_string());
    let (parts, body) = req.into_parts();
    let body = match axum::body::to_bytes(body, MAX_BODY).await {
        Ok(b) => b,
        Err(e) => return ApiError::new(StatusCode::BAD_REQUEST, format!("cannot read body: {e}")).into_response(),
    };
    let body_hash = store::content_id(&[&body]);

    let slot = state.0.replies.lock().await.entry(slot_key).or_default().clone();
    let mut cached = slot.lock().await;
    if let Some(c) = cached.as_ref() {
        if c.body_hash != body_hash {
            return ApiError::conflict("idempotency key reused with a different request body").into_response();
        }
        return replay(c);
    }

    let response = next.run(Request::from_parts(parts, Body::from(body))).await;
    let (rparts, rbody) = response.into_parts();
    let bytes = match axum::body::to_bytes(rbody, usize::MAX).await {
        Ok(b) => b,
        Err(e) => return ApiError::internal(format!("cannot buffer response: {e}")).into_response(),
    };
    let entry = CachedResponse {
        body_hash,
        status: rparts.status,
        content_type: rparts.headers.get(header::CONTENT_TYPE).cloned(),
        body: bytes.clone(),
    };
    if !rparts.status.is_server_error() {
        *cached = Some(entry);
    }
    Response::from_parts(rparts, Body::from(bytes))
}

fn replay(c: &CachedResponse) -> Response {
    let mut r = Response::new(Body::from(c.body.clone()));
    *r.status_mut() = c.status;
    if let Some(ct) = &c.content_type {
        r.headers_mut().insert(header::CONTENT_TYPE, ct.clone());
    }
    r.headers_mut().insert("idempotent-replay", HeaderValue::from_static("true"));
    r
}

/// Binds and serves until the process is stopped.
pub async fn serve(config: ServiceConfig, gateway: Gateway) -> std::io::Result<()> {
    let listen = config.listen;
    let state = AppState::new(config, gateway)?;
    let listener = tokio::net::TcpListener::bind(listen).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
