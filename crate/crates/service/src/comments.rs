//! Append-only JSON-lines log of user comments.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_COMMENT_CHARS: usize = 2000;
const MAX_REF_CHARS: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentRecord {
    /// Audio id or request id the comment refers to.
    pub ref_id: String,
    pub text: String,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
}

#[derive(Debug, Error)]
pub enum CommentError {
    #[error("comment text is empty")]
    Empty,
    #[error("comment text exceeds {MAX_COMMENT_CHARS} characters")]
    TooLong,
    #[error("ref_id exceeds {MAX_REF_CHARS} characters")]
    BadRef,
    #[error("cannot write comment log {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn validate_comment(ref_id: &str, text: &str) -> Result<(), CommentError> {
    if text.trim().is_empty() {
        return Err(CommentError::Empty);
    }
    if text.chars().count() > MAX_COMMENT_CHARS {
        return Err(CommentError::TooLong);
    }
    if ref_id.chars().count() > MAX_REF_CHARS {
        return Err(CommentError::BadRef);
    }
    Ok(())
}

pub struct CommentLog {
    path: PathBuf,
    lock: Mutex<()>,
}

impl CommentLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            lock: Mutex::new(()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Validates and appends one record.
    pub fn append(&self, ref_id: &str, text: &str) -> Result<CommentRecord, CommentError> {
        validate_comment(ref_id, text)?;
        let record = CommentRecord {
            ref_id: ref_id.to_string(),
            text: text.to_string(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        };
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        let io = |source| CommentError::Io {
            path: self.path.display().to_string(),
            source,
        };
        let _guard = self.lock.lock().expect("comment lock");
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path).map_err(io)?;
        file.write_all(line.as_bytes()).map_err(io)?;
        Ok(record)
    }

    pub fn read_all(&self) -> Result<Vec<CommentRecord>, CommentError> {
        let text = match std::fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(source) => {
                return Err(CommentError::Io {
                    path: self.path.display().to_string(),
                    source,
                })
            }
        };
        Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
    }
}
