use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tower_http::services::ServeDir;

use petrocap_core::dataset::{decode_image, preprocess_image};
use petrocap_core::model::{load_model, CaptionerModel, ModelError};

use crate::comments::{CommentError, CommentLog};
use crate::store::{spawn_sweeper, TempStore};
use crate::tts::{resolve_tts, TtsEngine, TtsError, OFFLINE_STUB};

pub const MAX_UPLOAD_BYTES: usize = 20 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub model_dir: Option<PathBuf>,
    pub backbone_dir: Option<PathBuf>,
    pub tts: String,
    pub tts_endpoint: Option<String>,
    pub ttl: Duration,
    pub sweep_interval: Duration,
    pub bind: SocketAddr,
    pub comments_path: PathBuf,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            model_dir: None,
            backbone_dir: None,
            tts: OFFLINE_STUB.to_string(),
            tts_endpoint: None,
            ttl: Duration::from_secs(15 * 60),
            sweep_interval: Duration::from_secs(60),
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            comments_path: PathBuf::from("comments.jsonl"),
            static_dir: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tts(#[from] TtsError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Serve(#[from] std::io::Error),
}

/// Shared, read-only model plus the two pieces of mutable state.
#[derive(Clone)]
pub struct AppState {
    pub model: Option<Arc<CaptionerModel>>,
    pub tts: Arc<dyn TtsEngine>,
    pub store: Arc<TempStore>,
    pub comments: Arc<CommentLog>,
}

impl AppState {
    pub fn new(model: Option<Arc<CaptionerModel>>, tts: Arc<dyn TtsEngine>, store: Arc<TempStore>, comments: Arc<CommentLog>) -> Self {
        Self {
            model,
            tts,
            store,
            comments,
        }
    }

    pub fn from_config(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let model = match &config.model_dir {
            Some(dir) => Some(Arc::new(load_model(dir, config.backbone_dir.as_deref(), None)?)),
            None => None,
        };
        let tts: Arc<dyn TtsEngine> = resolve_tts(&config.tts, config.tts_endpoint.as_deref())?.into();
        Ok(Self::new(
            model,
            tts,
            Arc::new(TempStore::new(config.ttl)),
            Arc::new(CommentLog::new(config.comments_path.clone())),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescribeResponse {
    pub description: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audio_id: Option<String>,
    pub model_name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub model: String,
    pub extractor: Option<String>,
    pub tts: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CommentRequest {
    #[serde(default)]
    pub ref_id: String,
    pub text: String,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/describe", post(describe))
        .route("/api/audio/{audio_id}", get(audio))
        .route("/api/comments", post(comment))
        .route("/api/health", get(health))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

async fn health(State(state): State<AppState>) -> Json<HealthResponse> {
    Json(HealthResponse {
        model: if state.model.is_some() { "loaded" } else { "absent" }.to_string(),
        extractor: state.model.as_ref().map(|m| m.extractor.name().to_string()),
        tts: state.tts.name().to_string(),
    })
}

async fn read_image_field(multipart: &mut Multipart) -> Result<Vec<u8>, Response> {
    loop {
        match multipart.next_field().await {
            Ok(Some(field)) if field.name() == Some("image") => {
                return field
                    .bytes()
                    .await
                    .map(|b| b.to_vec())
                    .map_err(|e| error(StatusCode::BAD_REQUEST, format!("cannot read upload: {e}")));
            }
            Ok(Some(_)) => continue,
            Ok(None) => return Err(error(StatusCode::BAD_REQUEST, "missing multipart field 'image'")),
            Err(e) => return Err(error(StatusCode::BAD_REQUEST, format!("malformed multipart body: {e}"))),
        }
    }
}

async fn describe(State(state): State<AppState>, mut multipart: Multipart) -> Response {
    let bytes = match read_image_field(&mut multipart).await {
        Ok(b) => b,
        Err(r) => return r,
    };
    if bytes.is_empty() {
        return error(StatusCode::BAD_REQUEST, "uploaded image is empty");
    }
    let Some(model) = state.model.clone() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no model is loaded");
    };
    let captioned = tokio::task::spawn_blocking(move || {
        let raw = decode_image(&bytes).map_err(|e| (StatusCode::BAD_REQUEST, e.to_string()))?;
        let prepared = preprocess_image(&raw, "upload").map_err(|e| (StatusCode::BAD_REQUEST, e.to_string()))?;
        model
            .generate_caption(&prepared, model.text.seq_len)
            .map(|d| (d, model.name.clone()))
            .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
    })
    .await;
    let (description, model_name) = match captioned {
        Ok(Ok(v)) => v,
        Ok(Err((status, msg))) => return error(status, msg),
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    if description.trim().is_empty() {
        return error(StatusCode::INTERNAL_SERVER_ERROR, "the model produced an empty description");
    }

    let tts = state.tts.clone();
    let text = description.clone();
    let speech = tokio::task::spawn_blocking(move || tts.synthesize(&text)).await;
    let (audio_id, warning) = match speech {
        Ok(Ok(mp3)) => (Some(state.store.insert(mp3)), None),
        Ok(Err(e)) => (None, Some(format!("audio unavailable: {e}"))),
        Err(e) => (None, Some(format!("audio unavailable: {e}"))),
    };
    let created_at = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    Json(DescribeResponse {
        description,
        audio_id,
        model_name,
        warning,
        created_at,
    })
    .into_response()
}

async fn audio(State(state): State<AppState>, Path(audio_id): Path<String>) -> Response {
    match state.store.get(&audio_id) {
        Some(bytes) => ([(header::CONTENT_TYPE, "audio/mpeg")], bytes).into_response(),
        None => error(StatusCode::NOT_FOUND, "unknown or expired audio id"),
    }
}

async fn comment(State(state): State<AppState>, Json(req): Json<CommentRequest>) -> Response {
    let log = state.comments.clone();
    let result = tokio::task::spawn_blocking(move || log.append(&req.ref_id, &req.text)).await;
    match result {
        Ok(Ok(record)) => (StatusCode::CREATED, Json(record)).into_response(),
        Ok(Err(e @ (CommentError::Empty | CommentError::TooLong | CommentError::BadRef))) => {
            error(StatusCode::BAD_REQUEST, e.to_string())
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Binds, starts the sweeper and serves until the process ends.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let state = AppState::from_config(&config)?;
    let sweeper = spawn_sweeper(state.store.clone(), config.sweep_interval);
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: config.bind,
            source,
        })?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    let app = router(state, config.static_dir.clone());
    let result = axum::serve(listener, app).await;
    sweeper.abort();
    result.map_err(ServiceError::from)
}
