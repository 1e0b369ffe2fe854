//! HTTP describe-service: upload a thin-section image, get its description
//! and a spoken MP3 version, and leave comments.
//!
//! Endpoints: `POST /api/describe`, `GET /api/audio/{id}`,
//! `POST /api/comments`, `GET /api/health`.

mod app;
pub mod comments;
pub mod store;
pub mod tts;

pub use app::{
    router, serve, AppState, CommentRequest, DescribeResponse, HealthResponse, ServiceConfig, ServiceError,
    MAX_UPLOAD_BYTES,
};
pub use comments::{CommentError, CommentLog, CommentRecord, MAX_COMMENT_CHARS};
pub use store::{spawn_sweeper, TempStore};
pub use tts::{is_mp3, resolve_tts, HttpTts, OfflineStubTts, TtsEngine, TtsError, HTTP_ENGINE, OFFLINE_STUB};
