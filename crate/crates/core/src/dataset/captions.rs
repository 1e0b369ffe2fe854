//! Tab-separated captions file: one `LABEL\tTEXT` record per line, where
//! `LABEL` is `CCC_NNNNN.jpg#k`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CaptionsError {
    #[error("line {line}: missing TAB between label and description")]
    MissingTab { line: usize },
    #[error("line {line}: label {label:?} must be NAME#k with a non-negative integer k")]
    BadLabel { line: usize, label: String },
    #[error("line {line}: empty description")]
    EmptyText { line: usize },
    #[error("line {line}: non-ASCII byte 0x{byte:02x} at column {column}")]
    NonAscii { line: usize, column: usize, byte: u8 },
    #[error("line {line}: invalid UTF-8")]
    InvalidUtf8 { line: usize },
}

/// Character set accepted by [`parse_captions_file`].
///
/// `Ascii` rejects any byte above 0x7f. `Utf8` additionally accepts accented
/// Spanish text, which is what real caption files contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Charset {
    Ascii,
    #[default]
    Utf8,
}

/// One description attached to an image label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub label: String,
    pub text: String,
}

impl CaptionRecord {
    /// Builds a record, validating the label and text.
    pub fn new(label: impl Into<String>, text: impl Into<String>) -> Result<Self, CaptionsError> {
        let label = label.into();
        let text = text.into();
        split_label(&label).ok_or_else(|| CaptionsError::BadLabel {
            line: 0,
            label: label.clone(),
        })?;
        if text.is_empty() {
            return Err(CaptionsError::EmptyText { line: 0 });
        }
        Ok(Self { label, text })
    }

    /// Label for the `#0` slot of an image.
    pub fn primary_label(filename: &str) -> String {
        format!("{filename}#0")
    }

    /// Image filename part of the label.
    pub fn image_name(&self) -> &str {
        split_label(&self.label).map(|(n, _)| n).unwrap_or(&self.label)
    }

    /// Description slot `k` of the label.
    pub fn slot(&self) -> u32 {
        split_label(&self.label).map(|(_, k)| k).unwrap_or(0)
    }
}

fn split_label(label: &str) -> Option<(&str, u32)> {
    let (name, slot) = label.split_once('#')?;
    if name.is_empty() || slot.is_empty() || slot.contains('#') {
        return None;
    }
    if !slot.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((name, slot.parse().ok()?))
}

/// Parses a captions file. Blank lines are skipped; `\r\n` endings are accepted.
pub fn parse_captions_file(content: &[u8], charset: Charset) -> Result<Vec<CaptionRecord>, CaptionsError> {
    let mut records = Vec::new();
    for (i, raw) in content.split(|&b| b == b'\n').enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        if charset == Charset::Ascii {
            if let Some(column) = raw.iter().position(|b| !b.is_ascii()) {
                return Err(CaptionsError::NonAscii {
                    line,
                    column: column + 1,
                    byte: raw[column],
                });
            }
        }
        let text = std::str::from_utf8(raw).map_err(|_| CaptionsError::InvalidUtf8 { line })?;
        if text.trim().is_empty() {
            continue;
        }
        let (label, description) = text
            .split_once('\t')
            .ok_or(CaptionsError::MissingTab { line })?;
        if split_label(label).is_none() {
            return Err(CaptionsError::BadLabel {
                line,
                label: label.to_string(),
            });
        }
        if description.is_empty() {
            return Err(CaptionsError::EmptyText { line });
        }
        records.push(CaptionRecord {
            label: label.to_string(),
            text: description.to_string(),
        });
    }
    Ok(records)
}

/// Serializes records as `LABEL\tTEXT\n` lines.
pub fn serialize_captions(records: &[CaptionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.label);
        out.push('\t');
        out.push_str(&r.text);
        out.push('\n');
    }
    out
}
