//! Expiring in-memory store for generated audio.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;

struct Entry {
    bytes: Bytes,
    expires: Instant,
}

/// Entries become unreachable as soon as their ttl passes; [`TempStore::sweep`]
/// frees their memory.
pub struct TempStore {
    ttl: Duration,
    entries: Mutex<HashMap<String, Entry>>,
}

impl TempStore {
    pub fn new(ttl: Duration) -> Self {
        Self {
            ttl,
            entries: Mutex::new(HashMap::new()),
        }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    /// Stores `bytes` under a fresh random id.
    pub fn insert(&self, bytes: impl Into<Bytes>) -> String {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let entry = Entry {
            bytes: bytes.into(),
            expires: Instant::now() + self.ttl,
        };
        self.entries.lock().expect("store lock").insert(id.clone(), entry);
        id
    }

    pub fn get(&self, id: &str) -> Option<Bytes> {
        let entries = self.entries.lock().expect("store lock");
        entries
            .get(id)
            .filter(|e| e.expires > Instant::now())
            .map(|e| e.bytes.clone())
    }

    /// Removes expired entries and returns how many were dropped.
    pub fn sweep(&self) -> usize {
        let now = Instant::now();
        let mut entries = self.entries.lock().expect("store lock");
        let before = entries.len();
        entries.retain(|_, e| e.expires > now);
        before - entries.len()
    }

    /// Number of entries held, expired or not.
    pub fn len(&self) -> usize {
        self.entries.lock().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_bytes(&self) -> usize {
        self.entries
            .lock()
            .expect("store lock")
            .values()
            .map(|e| e.bytes.len())
            .sum()
    }
}

/// Sweeps `store` every `interval` on the current tokio runtime.
pub fn spawn_sweeper(store: Arc<TempStore>, interval: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(interval);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tick.tick().await;
            store.sweep();
        }
    })
}
