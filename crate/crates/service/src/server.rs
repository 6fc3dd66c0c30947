//! HTTP editing service.

use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use inverso_core::editing::{edit_image, DirectionStore, EditMode, EditRequest, Method};
use inverso_core::encoder::{reconstruct, Encoder, InversionResult};
use inverso_core::generator::Generator;
use inverso_core::{imageio, metrics};
use lru::LruCache;
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Immutable models shared by all requests.
pub struct Models {
    pub generator: Generator,
    pub encoder: Encoder,
    pub directions: DirectionStore,
    pub checkpoint_version: String,
}

impl Models {
    pub fn new(generator: Generator, encoder: Encoder, directions: DirectionStore) -> inverso_core::Result<Self> {
        let version = format!(
            "v{}-{:016x}-{:016x}",
            inverso_core::checkpoint::FORMAT_VERSION,
            generator.params().checksum()?,
            encoder.params().checksum()?
        );
        Ok(Self { generator, encoder, directions, checkpoint_version: version })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AppliedEdit {
    pub direction: String,
    pub alpha: f64,
    pub mode: EditMode,
}

pub struct Session {
    pub id: String,
    pub source_png: Vec<u8>,
    pub result: InversionResult,
    pub history: Vec<AppliedEdit>,
}

pub type SessionHandle = Arc<Mutex<Session>>;

#[derive(Clone)]
pub struct AppState {
    pub models: Arc<Models>,
    pub sessions: Arc<Mutex<LruCache<String, SessionHandle>>>,
}

impl AppState {
    pub fn new(models: Models, capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("capacity is positive");
        Self { models: Arc::new(models), sessions: Arc::new(Mutex::new(LruCache::new(cap))) }
    }

    pub fn session(&self, id: &str) -> Option<SessionHandle> {
        self.sessions.lock().expect("session store poisoned").get(id).cloned()
    }
}

pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, Json(json!({ "error": m }))).into_response(),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, Json(json!({ "error": m }))).into_response(),
            ApiError::Internal(m) => {
                let id = format!("{:016x}", rand::random::<u64>());
                log::error!("internal error {id}: {m}");
                (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": "internal error", "error_id": id }))).into_response()
            }
        }
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::Internal(e.to_string())
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(internal)?
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InvertBody {
    image: String,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct InvertResponse {
    pub session_id: String,
    pub metrics: InvertMetrics,
    pub images: LadderImages,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct InvertMetrics {
    pub psnr_w: f64,
    pub psnr_wplus: f64,
    pub psnr_f: f64,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct LadderImages {
    pub w: String,
    pub wplus: String,
    pub f: String,
}

async fn invert(State(state): State<AppState>, body: Bytes) -> Result<Json<InvertResponse>, ApiError> {
    let req: InvertBody = parse(&body)?;
    let png = BASE64.decode(req.image.trim()).map_err(|e| ApiError::BadRequest(format!("image is not base64: {e}")))?;
    let models = state.models.clone();
    let (session, response) = blocking(move || {
        let g = &models.generator;
        let img = imageio::decode_png(&png, g.config().resolution).map_err(|e| ApiError::BadRequest(format!("image is not a readable PNG: {e}")))?;
        let result = models.encoder.invert(&img).map_err(internal)?;
        let recs = reconstruct(g, &result).map_err(internal)?;
        let psnr = |r| metrics::psnr(&img, r).map(|v| v[0]).map_err(internal);
        let b64 = |r| imageio::encode_png(r, 0).map(|b| BASE64.encode(b)).map_err(internal);
        let id = format!("{:032x}", rand::random::<u128>());
        let response = InvertResponse {
            session_id: id.clone(),
            metrics: InvertMetrics { psnr_w: psnr(&recs.w)?, psnr_wplus: psnr(&recs.w_plus)?, psnr_f: psnr(&recs.f)? },
            images: LadderImages { w: b64(&recs.w)?, wplus: b64(&recs.w_plus)?, f: b64(&recs.f)? },
        };
        Ok((Session { id, source_png: png, result, history: Vec::new() }, response))
    })
    .await?;
    state.sessions.lock().expect("session store poisoned").put(session.id.clone(), Arc::new(Mutex::new(session)));
    Ok(Json(response))
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct DirectionInfo {
    pub name: String,
    pub method: Method,
    pub sigma: f64,
}

async fn directions(State(state): State<AppState>) -> Json<Vec<DirectionInfo>> {
    Json(state.models.directions.iter().map(|d| DirectionInfo { name: d.name.clone(), method: d.method, sigma: d.sigma }).collect())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditBody {
    session_id: String,
    direction: String,
    alpha: f64,
    mode: EditMode,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct EditResponse {
    pub image: String,
    pub applied: AppliedEdit,
}

async fn edit(State(state): State<AppState>, body: Bytes) -> Result<Json<EditResponse>, ApiError> {
    let req: EditBody = parse(&body)?;
    if !req.alpha.is_finite() {
        return Err(ApiError::BadRequest("alpha must be finite".into()));
    }
    if state.models.directions.get(&req.direction).is_err() {
        return Err(ApiError::BadRequest(format!("unknown direction {}", req.direction)));
    }
    let handle = state.session(&req.session_id).ok_or_else(|| ApiError::NotFound(format!("unknown session {}", req.session_id)))?;
    let models = state.models.clone();
    blocking(move || {
        // Holding the session lock across the edit serialises edits per session.
        let mut session = handle.lock().map_err(internal)?;
        let edit = EditRequest { direction: req.direction.clone(), alpha: req.alpha, mode: req.mode };
        let image = edit_image(&session.result, &models.generator, &models.directions, &edit).map_err(internal)?;
        let png = imageio::encode_png(&image, 0).map_err(internal)?;
        let applied = AppliedEdit { direction: req.direction, alpha: req.alpha, mode: req.mode };
        session.history.push(applied.clone());
        Ok(Json(EditResponse { image: BASE64.encode(png), applied }))
    })
    .await
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "checkpoint_version": state.models.checkpoint_version }))
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/invert", post(invert))
        .route("/api/directions", get(directions))
        .route("/api/edit", post(edit))
        .route("/api/health", get(health))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(state: AppState, host: &str, port: u16, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir)).await
}
