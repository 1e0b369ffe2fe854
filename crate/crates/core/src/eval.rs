//! Sentence-level BLEU, caption segmentation and per-category reports.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{parameter_applies, DatasetManifest, Parameter, RockCategory, SegmentLabel};
use crate::dataset::{load_image, preprocess_image};
use crate::model::CaptionerModel;
use crate::text::{standardize, tokenize};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("BLEU value {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("caption has no sentences")]
    EmptyCaption,
    #[error("invalid BLEU configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Generation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    /// Zero clipped counts are replaced by this value.
    Epsilon(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_n: usize,
    pub weights: Vec<f64>,
    pub smoothing: Smoothing,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_n: 4,
            weights: vec![0.25; 4],
            smoothing: Smoothing::Epsilon(1e-9),
        }
    }
}

impl BleuConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.max_n == 0 || self.weights.len() != self.max_n {
            return Err(EvalError::InvalidConfig("weights must have max_n >= 1 entries".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(EvalError::InvalidConfig("weights must be non-negative and sum to 1".into()));
        }
        if let Smoothing::Epsilon(e) = self.smoothing {
            if !(e > 0.0 && e.is_finite()) {
                return Err(EvalError::InvalidConfig("epsilon must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Candidate n-grams matched against the reference, each capped by its
/// reference multiplicity, and the number of candidate n-grams.
pub fn ngram_clipped_precision<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> (usize, usize) {
    assert!(n >= 1, "n-gram order must be positive");
    fn counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
        let mut m: HashMap<Vec<&str>, usize> = HashMap::new();
        if tokens.len() >= n {
            for w in tokens.windows(n) {
                *m.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
            }
        }
        m
    }
    let cand = counts(candidate, n);
    let refs = counts(reference, n);
    let clipped = cand
        .iter()
        .map(|(g, c)| (*c).min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (clipped, (candidate.len() + 1).saturating_sub(n))
}

pub fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// BLEU over token lists. Orders longer than the candidate have no n-grams
/// and are left out, with the remaining weights rescaled to sum to one.
pub fn bleu_tokens<S: AsRef<str>>(candidate: &[S], reference: &[S], config: &BleuConfig) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut weight_sum = 0.0;
    for n in 1..=config.max_n {
        let (clipped, total) = ngram_clipped_precision(candidate, reference, n);
        if total == 0 {
            continue;
        }
        let w = config.weights[n - 1];
        let p = match (clipped, config.smoothing) {
            (0, Smoothing::None) => return 0.0,
            (0, Smoothing::Epsilon(e)) => e / total as f64,
            (c, _) => c as f64 / total as f64,
        };
        log_sum += w * p.ln();
        weight_sum += w;
    }
    let geo = if weight_sum > 0.0 { (log_sum / weight_sum).exp() } else { 0.0 };
    (brevity_penalty(candidate.len(), reference.len()) * geo).clamp(0.0, 1.0)
}

/// BLEU between two texts after the caption standardization and tokenization.
pub fn bleu(candidate: &str, reference: &str, config: &BleuConfig) -> f64 {
    let c = tokenize(&standardize(candidate));
    let r = tokenize(&standardize(reference));
    bleu_tokens(&c, &r, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Qualitative {
    Low,
    Medium,
    High,
}

impl Qualitative {
    pub fn as_str(self) -> &'static str {
        match self {
            Qualitative::Low => "Low",
            Qualitative::Medium => "Medium",
            Qualitative::High => "High",
        }
    }
}

impl std::fmt::Display for Qualitative {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Low `[0, 0.70)`, Medium `[0.70, 0.85)`, High `[0.85, 1]`.
pub fn qualitative(value: f64) -> Result<Qualitative, EvalError> {
    if !(0.0..=1.0).contains(&value) {
        return Err(EvalError::OutOfRange(value));
    }
    Ok(if value >= 0.85 {
        Qualitative::High
    } else if value >= 0.70 {
        Qualitative::Medium
    } else {
        Qualitative::Low
    })
}

/// Which segment labels each category's captions contain, in caption order.
#[derive(Debug, Clone, Default)]
pub struct SegmentSchema {
    overrides: HashMap<RockCategory, Vec<SegmentLabel>>,
}

impl SegmentSchema {
    pub fn with_override(mut self, category: RockCategory, labels: Vec<SegmentLabel>) -> Self {
        self.overrides.insert(category, labels);
        self
    }

    pub fn labels(&self, category: RockCategory) -> Vec<SegmentLabel> {
        if let Some(l) = self.overrides.get(&category) {
            return l.clone();
        }
        SegmentLabel::ALL
            .into_iter()
            .filter(|l| *l != SegmentLabel::FormAndHabit || parameter_applies(category, Parameter::FormAndHabit))
            .collect()
    }
}

/// The five scored caption groups, indexed by [`SegmentLabel::index`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SegmentTexts(pub [String; 5]);

impl SegmentTexts {
    pub fn get(&self, label: SegmentLabel) -> &str {
        &self.0[label.index()]
    }

    fn push(&mut self, label: SegmentLabel, sentence: &str) {
        let slot = &mut self.0[label.index()];
        if !slot.is_empty() {
            slot.push_str(". ");
        }
        slot.push_str(sentence);
    }
}

fn has_word(standardized: &str, words: &[&str]) -> bool {
    standardized
        .split(|c: char| !c.is_alphanumeric())
        .any(|w| words.contains(&w))
}

fn keyword_label(sentence: &str) -> Option<SegmentLabel> {
    let s = standardize(sentence);
    if has_word(&s, &["relieve", "interferencia"]) {
        Some(SegmentLabel::ReliefOrInterference)
    } else if has_word(&s, &["textura", "sorteo", "empaquetamiento"]) {
        Some(SegmentLabel::Texture)
    } else if has_word(&s, &["minerales", "componentes"]) {
        Some(SegmentLabel::Minerals)
    } else if has_word(&s, &["hábito", "cristales", "clastos", "forma", "esfericidad"]) {
        Some(SegmentLabel::FormAndHabit)
    } else {
        None
    }
}

/// Splits `", con (un) hábito ..."` off a minerals sentence.
fn split_habit_tail(sentence: &str) -> (&str, Option<&str>) {
    for marker in [", con un hábito", ", con hábito"] {
        if let Some(pos) = sentence.find(marker) {
            return (sentence[..pos].trim(), Some(sentence[pos + 1..].trim()));
        }
    }
    (sentence, None)
}

/// Assigns each sentence of `caption` to one of the five groups.
///
/// The first sentence is the rock-and-light group. Later sentences are
/// placed by keyword; a sentence without keywords goes to the label after
/// the previous sentence's label in the category's schema.
pub fn split_segments(caption: &str, category: RockCategory, schema: &SegmentSchema) -> Result<SegmentTexts, EvalError> {
    let sentences: Vec<&str> = caption.split('.').map(str::trim).filter(|s| !s.is_empty()).collect();
    if sentences.is_empty() {
        return Err(EvalError::EmptyCaption);
    }
    let order = schema.labels(category);
    let mut out = SegmentTexts::default();
    let mut previous = SegmentLabel::RockAndLight;
    out.push(previous, sentences[0]);
    for sentence in &sentences[1..] {
        let label = keyword_label(sentence).unwrap_or_else(|| {
            let pos = order.iter().position(|l| *l == previous);
            match pos {
                Some(i) if i + 1 < order.len() => order[i + 1],
                _ => previous,
            }
        });
        if label == SegmentLabel::Minerals {
            let (head, tail) = split_habit_tail(sentence);
            out.push(label, head);
            if let Some(t) = tail {
                out.push(SegmentLabel::FormAndHabit, t);
            }
        } else {
            out.push(label, sentence);
        }
        previous = label;
    }
    Ok(out)
}

/// BLEU of one segment; `None` when both sides lack it.
pub fn segment_bleu(candidate: &str, reference: &str, config: &BleuConfig) -> Option<f64> {
    if candidate.trim().is_empty() && reference.trim().is_empty() {
        None
    } else {
        Some(bleu(candidate, reference, config))
    }
}

/// A scored caption pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCaption {
    pub category: RockCategory,
    pub image: String,
    pub candidate: String,
    pub reference: String,
    pub bleu: f64,
    pub segments: [Option<f64>; 5],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub category: Option<RockCategory>,
    pub images: usize,
    pub bleu: f64,
    pub segments: [Option<f64>; 5],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// Category rows in report order.
    pub rows: Vec<ReportRow>,
    /// Mean of the category rows.
    pub overall: ReportRow,
    /// Categories that had no images.
    pub omitted: Vec<RockCategory>,
    pub captions: Vec<ScoredCaption>,
}

pub const OVERALL_LABEL: &str = "promedio";
pub const REPORT_COLUMNS: [&str; 8] = [
    "category",
    "bleu",
    "bleu_label",
    "rock_and_light",
    "texture",
    "minerals",
    "form_and_habit",
    "relief_or_interference",
];

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores one candidate against its reference.
pub fn score_caption(
    category: RockCategory,
    image: &str,
    candidate: &str,
    reference: &str,
    config: &BleuConfig,
    schema: &SegmentSchema,
) -> ScoredCaption {
    let split = |text: &str| split_segments(text, category, schema).unwrap_or_default();
    let (cs, rs) = (split(candidate), split(reference));
    let mut segments = [None; 5];
    for label in SegmentLabel::ALL {
        segments[label.index()] = segment_bleu(cs.get(label), rs.get(label), config);
    }
    ScoredCaption {
        category,
        image: image.to_string(),
        candidate: candidate.to_string(),
        reference: reference.to_string(),
        bleu: bleu(candidate, reference, config),
        segments,
    }
}

/// Aggregates scored captions into per-category means and the overall row.
pub fn build_report(captions: Vec<ScoredCaption>) -> BleuReport {
    let mut rows = Vec::new();
    let mut omitted = Vec::new();
    for category in RockCategory::REPORT_ORDER {
        let items: Vec<&ScoredCaption> = captions.iter().filter(|c| c.category == category).collect();
        if items.is_empty() {
            omitted.push(category);
            continue;
        }
        let mut segments = [None; 5];
        for (i, seg) in segments.iter_mut().enumerate() {
            *seg = mean(items.iter().filter_map(|c| c.segments[i]));
        }
        rows.push(ReportRow {
            label: category.name().to_string(),
            category: Some(category),
            images: items.len(),
            bleu: mean(items.iter().map(|c| c.bleu)).expect("non-empty"),
            segments,
        });
    }
    let mut segments = [None; 5];
    for (i, seg) in segments.iter_mut().enumerate() {
        *seg = mean(rows.iter().filter_map(|r| r.segments[i]));
    }
    let overall = ReportRow {
        label: OVERALL_LABEL.to_string(),
        category: None,
        images: rows.iter().map(|r| r.images).sum(),
        bleu: mean(rows.iter().map(|r| r.bleu)).unwrap_or(0.0),
        segments,
    };
    BleuReport {
        rows,
        overall,
        omitted,
        captions,
    }
}

/// Scores `(category, image, candidate, reference)` tuples.
pub fn evaluate_captions(
    items: &[(RockCategory, String, String, String)],
    config: &BleuConfig,
    schema: &SegmentSchema,
) -> Result<BleuReport, EvalError> {
    config.validate()?;
    let captions = items
        .par_iter()
        .map(|(cat, image, cand, reference)| score_caption(*cat, image, cand, reference, config, schema))
        .collect();
    Ok(build_report(captions))
}

/// Captions every test image greedily and scores it against its reference.
pub fn evaluate_testset(
    model: &CaptionerModel,
    testset: &DatasetManifest,
    config: &BleuConfig,
    schema: &SegmentSchema,
) -> Result<BleuReport, EvalError> {
    let max_len = model.text.seq_len;
    let items = testset
        .records
        .par_iter()
        .map(|record| {
            let reference = testset
                .caption(record)
                .ok_or_else(|| EvalError::Generation(format!("{}: no reference caption", record.filename)))?;
            let raw = load_image(&record.path).map_err(|e| EvalError::Generation(format!("{}: {e}", record.filename)))?;
            let prepared = preprocess_image(&raw, record.filename.clone())
                .map_err(|e| EvalError::Generation(format!("{}: {e}", record.filename)))?;
            let candidate = model
                .generate_caption(&prepared, max_len)
                .map_err(|e| EvalError::Generation(format!("{}: {e}", record.filename)))?;
            Ok((record.category, record.filename.clone(), candidate, reference.text.clone()))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    evaluate_captions(&items, config, schema)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl BleuReport {
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for row in self.rows.iter().chain(std::iter::once(&self.overall)) {
            let label = qualitative(row.bleu).map(Qualitative::as_str).unwrap_or("-");
            let _ = write!(out, "{},{:.4},{}", row.label, row.bleu, label);
            for s in row.segments {
                let _ = write!(out, ",{}", cell(s));
            }
            out.push('\n');
        }
        out
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<18} {:>7} {:<7} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "category", "bleu", "level", "rock", "texture", "minerals", "form", "relief"
        );
        for row in self.rows.iter().chain(std::iter::once(&self.overall)) {
            let label = qualitative(row.bleu).map(Qualitative::as_str).unwrap_or("-");
            let _ = write!(out, "{:<18} {:>7.3} {:<7}", row.label, row.bleu, label);
            for s in row.segments {
                let _ = write!(out, " {:>8}", s.map_or("-".to_string(), |x| format!("{x:.3}")));
            }
            out.push('\n');
        }
        out
    }
}
