//! Caption standardization, tokenization and fixed-length vectorization.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD_TOKEN: &str = "<pad>";
pub const OOV_TOKEN: &str = "[unk]";
pub const START_TOKEN: &str = "<start>";
pub const END_TOKEN: &str = "<end>";

pub const PAD_ID: u32 = 0;
pub const OOV_ID: u32 = 1;
pub const START_ID: u32 = 2;
pub const END_ID: u32 = 3;

const RESERVED: [&str; 4] = [PAD_TOKEN, OOV_TOKEN, START_TOKEN, END_TOKEN];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            vocab_size: 300,
            seq_len: 60,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("vocab_size must be at least 4 and seq_len at least 2 (got {vocab_size}, {seq_len})")]
    BadConfig { vocab_size: usize, seq_len: usize },
    #[error("vocabulary line {line}: {reason}")]
    BadVocabulary { line: usize, reason: String },
}

impl TextConfig {
    pub fn validate(&self) -> Result<(), TextError> {
        if self.vocab_size < 4 || self.seq_len < 2 {
            return Err(TextError::BadConfig {
                vocab_size: self.vocab_size,
                seq_len: self.seq_len,
            });
        }
        Ok(())
    }
}

/// Lowercases and keeps only letters (accented ones included), digits,
/// spaces, commas and periods. Runs of whitespace collapse to one space.
pub fn standardize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let kept: String = lowered
        .chars()
        .filter_map(|c| {
            if c.is_alphanumeric() || c == ',' || c == '.' {
                Some(c)
            } else if c.is_whitespace() {
                Some(' ')
            } else {
                None
            }
        })
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits standardized text on spaces, emitting `,` and `.` as their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if c == ',' || c == '.' {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Word/id map with reserved ids 0 (pad), 1 (oov), 2 (`<start>`), 3 (`<end>`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, ids }
    }

    /// Reserved tokens first, then corpus tokens by descending frequency with
    /// lexicographic tie-breaking, up to `vocab_size` entries.
    pub fn build<S: AsRef<str>>(corpus: &[S], config: &TextConfig) -> Result<Self, TextError> {
        config.validate()?;
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in tokenize(&standardize(text.as_ref())) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            ranked
                .into_iter()
                .take(config.vocab_size - RESERVED.len())
                .map(|(t, _)| t),
        );
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number (from 0) is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            writeln!(out, "{t}").expect("writing to a String");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TextError> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, expected) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(expected) {
                return Err(TextError::BadVocabulary {
                    line: i,
                    reason: format!("expected reserved token {expected:?}"),
                });
            }
        }
        let mut seen = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(TextError::BadVocabulary {
                    line: i,
                    reason: "tokens must be non-empty and contain no whitespace".into(),
                });
            }
            if let Some(prev) = seen.insert(t.as_str(), i) {
                return Err(TextError::BadVocabulary {
                    line: i,
                    reason: format!("duplicate of line {prev}"),
                });
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Fixed-length id sequence; positions at and beyond `true_length` hold the pad id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub true_length: usize,
}

impl TokenSequence {
    /// Builds a padded sequence from raw ids (truncating to `seq_len`).
    pub fn from_ids(ids: &[u32], seq_len: usize) -> Self {
        let true_length = ids.len().min(seq_len);
        let mut padded = ids[..true_length].to_vec();
        padded.resize(seq_len, PAD_ID);
        Self {
            ids: padded,
            true_length,
        }
    }

    /// Decoder input: every position but the last.
    pub fn input_ids(&self) -> &[u32] {
        &self.ids[..self.ids.len() - 1]
    }

    /// Decoder target: every position but the first.
    pub fn target_ids(&self) -> &[u32] {
        &self.ids[1..]
    }
}

/// `<start> tokens... <end>`, mapped to ids and padded/truncated to `seq_len`.
/// Truncation drops from the tail, so `<start>` is always kept.
pub fn vectorize(text: &str, vocab: &Vocabulary, config: &TextConfig) -> TokenSequence {
    let mut ids = vec![START_ID];
    ids.extend(
        tokenize(&standardize(text))
            .iter()
            .map(|t| vocab.id_of(t).unwrap_or(OOV_ID)),
    );
    ids.push(END_ID);
    TokenSequence::from_ids(&ids, config.seq_len)
}

/// Renders ids as text, stopping at the first `<end>`. Pad and `<start>` are
/// dropped, out-of-vocabulary ids render as `[unk]`, and `,`/`.` attach to the
/// preceding word.
pub fn detokenize_ids(ids: &[u32], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for &id in ids {
        match id {
            END_ID => break,
            PAD_ID | START_ID => continue,
            _ => {}
        }
        let word = vocab.token_of(id).unwrap_or(OOV_TOKEN);
        if !(out.is_empty() || word == "," || word == ".") {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    detokenize_ids(&seq.ids, vocab)
}
