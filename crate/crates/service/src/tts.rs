//! Text-to-speech engines producing MP3 bytes.

use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TtsError {
    #[error("nothing to synthesize")]
    EmptyText,
    #[error("speech request failed: {0}")]
    Request(String),
    #[error("speech engine returned {0} bytes that are not MP3")]
    NotMp3(usize),
    #[error("unknown speech engine '{0}'")]
    UnknownEngine(String),
}

pub trait TtsEngine: Send + Sync {
    fn name(&self) -> &str;
    fn synthesize(&self, text: &str) -> Result<Vec<u8>, TtsError>;
}

/// True for an ID3 tag or an MPEG audio frame sync.
pub fn is_mp3(bytes: &[u8]) -> bool {
    bytes.starts_with(b"ID3") || (bytes.len() >= 2 && bytes[0] == 0xFF && bytes[1] & 0xE0 == 0xE0)
}

pub const OFFLINE_STUB: &str = "offline-stub";
pub const HTTP_ENGINE: &str = "http";

/// MPEG-1 Layer III, 128 kbit/s, 44.1 kHz, no CRC, no padding.
const FRAME_HEADER: [u8; 4] = [0xFF, 0xFB, 0x90, 0x64];
const FRAME_LEN: usize = 417;
/// 1152 samples at 44.1 kHz.
const FRAME_SECONDS: f64 = 1152.0 / 44_100.0;
const SECONDS_PER_WORD: f64 = 0.4;

/// Emits silent frames, about 0.4 s per word. Needs no network.
#[derive(Debug, Clone, Copy, Default)]
pub struct OfflineStubTts;

impl TtsEngine for OfflineStubTts {
    fn name(&self) -> &str {
        OFFLINE_STUB
    }

    fn synthesize(&self, text: &str) -> Result<Vec<u8>, TtsError> {
        let words = text.split_whitespace().count();
        if words == 0 {
            return Err(TtsError::EmptyText);
        }
        let frames = (words as f64 * SECONDS_PER_WORD / FRAME_SECONDS).ceil() as usize;
        let mut out = Vec::with_capacity(frames * FRAME_LEN);
        for _ in 0..frames {
            out.extend_from_slice(&FRAME_HEADER);
            out.resize(out.len() + FRAME_LEN - FRAME_HEADER.len(), 0);
        }
        Ok(out)
    }
}

pub const DEFAULT_TTS_ENDPOINT: &str = "https://translate.google.com/translate_tts";
const CHUNK_CHARS: usize = 100;

/// Client for a web speech endpoint taking `q` and `tl` query parameters
/// and answering with MP3. Long texts are sent in word-aligned chunks whose
/// audio is concatenated.
#[derive(Debug, Clone)]
pub struct HttpTts {
    pub endpoint: String,
    pub language: String,
    pub timeout: Duration,
}

impl Default for HttpTts {
    fn default() -> Self {
        Self {
            endpoint: DEFAULT_TTS_ENDPOINT.to_string(),
            language: "es".to_string(),
            timeout: Duration::from_secs(15),
        }
    }
}

fn chunks(text: &str, max: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut cur = String::new();
    for word in text.split_whitespace() {
        if !cur.is_empty() && cur.chars().count() + 1 + word.chars().count() > max {
            out.push(std::mem::take(&mut cur));
        }
        if !cur.is_empty() {
            cur.push(' ');
        }
        cur.push_str(word);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl TtsEngine for HttpTts {
    fn name(&self) -> &str {
        HTTP_ENGINE
    }

    fn synthesize(&self, text: &str) -> Result<Vec<u8>, TtsError> {
        let parts = chunks(text, CHUNK_CHARS);
        if parts.is_empty() {
            return Err(TtsError::EmptyText);
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let total = parts.len().to_string();
        let mut audio = Vec::new();
        for (i, part) in parts.iter().enumerate() {
            let idx = i.to_string();
            let mut response = agent
                .get(&self.endpoint)
                .query("ie", "UTF-8")
                .query("client", "tw-ob")
                .query("tl", &self.language)
                .query("total", &total)
                .query("idx", &idx)
                .query("q", part)
                .call()
                .map_err(|e| TtsError::Request(e.to_string()))?;
            let bytes = response
                .body_mut()
                .read_to_vec()
                .map_err(|e| TtsError::Request(e.to_string()))?;
            if !is_mp3(&bytes) {
                return Err(TtsError::NotMp3(bytes.len()));
            }
            audio.extend_from_slice(&bytes);
        }
        Ok(audio)
    }
}

/// `offline-stub`, or `http` against `endpoint` (default public endpoint).
pub fn resolve_tts(name: &str, endpoint: Option<&str>) -> Result<Box<dyn TtsEngine>, TtsError> {
    match name {
        OFFLINE_STUB => Ok(Box::new(OfflineStubTts)),
        HTTP_ENGINE => {
            let mut engine = HttpTts::default();
            if let Some(e) = endpoint {
                engine.endpoint = e.to_string();
            }
            Ok(Box::new(engine))
        }
        other => Err(TtsError::UnknownEngine(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    #[test]
    fn stub_output_is_mp3_frames() {
        let mp3 = OfflineStubTts.synthesize("la roca es gris").unwrap();
        assert!(is_mp3(&mp3));
        assert_eq!(mp3.len() % FRAME_LEN, 0);
        assert!(mp3.chunks(FRAME_LEN).all(|f| f[..4] == FRAME_HEADER));
        let longer = OfflineStubTts.synthesize("la roca es gris y tiene cuarzo").unwrap();
        assert!(longer.len() > mp3.len());
        assert!(matches!(OfflineStubTts.synthesize("  "), Err(TtsError::EmptyText)));
    }

    #[test]
    fn mp3_detection() {
        assert!(is_mp3(b"ID3\x04rest"));
        assert!(is_mp3(&[0xFF, 0xF3, 0x00]));
        assert!(!is_mp3(b"RIFF"));
        assert!(!is_mp3(&[0xFF]));
    }

    #[test]
    fn chunking_keeps_words_whole() {
        let text = "palabra ".repeat(40);
        let parts = chunks(&text, 30);
        assert!(parts.iter().all(|p| p.chars().count() <= 30));
        assert_eq!(parts.join(" "), text.trim());
    }

    /// One-shot HTTP server answering every request with `body`.
    fn serve(body: Vec<u8>, requests: usize) -> (String, mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for stream in listener.incoming().take(requests) {
                let mut stream = stream.unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    if h == "\r\n" || h.is_empty() {
                        break;
                    }
                }
                tx.send(line).unwrap();
                let head = format!(
                    "HTTP/1.1 200 OK\r\nContent-Type: audio/mpeg\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    body.len()
                );
                stream.write_all(head.as_bytes()).unwrap();
                stream.write_all(&body).unwrap();
            }
        });
        (format!("http://{addr}/translate_tts"), rx)
    }

    #[test]
    fn http_engine_queries_spanish_voice() {
        let body = OfflineStubTts.synthesize("hola").unwrap();
        let (url, rx) = serve(body.clone(), 1);
        let engine = resolve_tts(HTTP_ENGINE, Some(&url)).unwrap();
        let audio = engine.synthesize("roca ígnea").unwrap();
        assert_eq!(audio, body);
        let request = rx.recv().unwrap();
        assert!(request.starts_with("GET /translate_tts?"), "{request}");
        assert!(request.contains("tl=es"));
        assert!(request.contains("q=roca"));
    }

    #[test]
    fn http_engine_rejects_non_audio() {
        let (url, _rx) = serve(b"<html>no</html>".to_vec(), 1);
        let engine = HttpTts {
            endpoint: url,
            ..HttpTts::default()
        };
        assert!(matches!(engine.synthesize("hola"), Err(TtsError::NotMp3(_))));
    }

    #[test]
    fn unreachable_endpoint_is_an_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let engine = HttpTts {
            endpoint: format!("http://{addr}/tts"),
            timeout: Duration::from_secs(2),
            ..HttpTts::default()
        };
        assert!(matches!(engine.synthesize("hola"), Err(TtsError::Request(_))));
        assert!(resolve_tts("festival", None).is_err());
    }
}
