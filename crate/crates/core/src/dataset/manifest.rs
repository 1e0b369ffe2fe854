use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::captions::CaptionRecord;
use super::category::{LightType, RockCategory};
use super::naming::{format_image_name, parse_image_name, NameError};

/// One image of the corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub category: RockCategory,
    pub image_index: u32,
    pub light: Option<LightType>,
    pub path: PathBuf,
    pub filename: String,
}

impl ImageRecord {
    /// Builds a record for `filename`, validating the name.
    pub fn from_path(path: PathBuf, light: Option<LightType>) -> Result<Self, NameError> {
        let filename = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let (category, image_index) = parse_image_name(&filename)?;
        Ok(Self {
            category,
            image_index,
            light,
            path,
            filename,
        })
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate caption label {0:?}")]
    DuplicateCaption(String),
    #[error("duplicate image file {filename:?} ({first} and {second})")]
    DuplicateImage {
        filename: String,
        first: PathBuf,
        second: PathBuf,
    },
    #[error("manifest document is malformed: {0}")]
    Format(#[from] serde_json::Error),
    #[error("manifest is invalid: {} problem(s), first: {}", .0.len(), .0[0])]
    Invalid(Vec<Diagnostic>),
}

/// A non-fatal problem found while assembling or validating a manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    InvalidName { filename: String, error: NameError },
    OrphanImage { filename: String },
    OrphanCaption { label: String },
    Inconsistent { filename: String, reason: String },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::InvalidName { filename, error } => write!(f, "{filename}: {error}"),
            Diagnostic::OrphanImage { filename } => write!(f, "{filename}: no #0 caption"),
            Diagnostic::OrphanCaption { label } => write!(f, "{label}: caption without image"),
            Diagnostic::Inconsistent { filename, reason } => write!(f, "{filename}: {reason}"),
        }
    }
}

/// Validated corpus: images that parsed and have a `#0` caption.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    /// Keyed by image filename.
    pub captions: BTreeMap<String, CaptionRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn caption(&self, record: &ImageRecord) -> Option<&CaptionRecord> {
        self.captions.get(&record.filename)
    }

    /// Image count per category; every category is present, possibly with 0.
    pub fn category_counts(&self) -> BTreeMap<RockCategory, usize> {
        let mut counts: BTreeMap<_, _> = RockCategory::ALL.iter().map(|c| (*c, 0)).collect();
        for r in &self.records {
            *counts.get_mut(&r.category).expect("all categories seeded") += 1;
        }
        counts
    }

    /// True when all 14 categories hold the same number of images.
    pub fn is_balanced(&self) -> bool {
        let counts = self.category_counts();
        let first = counts[&RockCategory::Andesita];
        counts.values().all(|&c| c == first)
    }

    /// Subset containing only the given records (captions filtered to match).
    pub fn subset(&self, records: Vec<ImageRecord>) -> DatasetManifest {
        let captions = records
            .iter()
            .filter_map(|r| self.captions.get(&r.filename).map(|c| (r.filename.clone(), c.clone())))
            .collect();
        DatasetManifest { records, captions }
    }
}

/// Result of [`build_manifest`].
#[derive(Debug, Clone)]
pub struct ManifestBuild {
    pub manifest: DatasetManifest,
    pub diagnostics: Vec<Diagnostic>,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

/// Scans `image_dir` recursively and matches image files with their `#0` captions.
///
/// Files whose names fail to parse, images without a caption, and captions
/// without an image are reported as diagnostics rather than errors.
pub fn build_manifest(
    image_dir: &Path,
    captions: &[CaptionRecord],
    lights: &HashMap<String, LightType>,
) -> Result<ManifestBuild, ManifestError> {
    let mut by_label: HashMap<&str, &CaptionRecord> = HashMap::new();
    for c in captions {
        if by_label.insert(c.label.as_str(), c).is_some() {
            return Err(ManifestError::DuplicateCaption(c.label.clone()));
        }
    }

    let mut files: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in walkdir::WalkDir::new(image_dir).sort_by_file_name() {
        let entry = entry.map_err(|e| ManifestError::Io {
            path: e.path().map(Path::to_path_buf).unwrap_or_else(|| image_dir.to_path_buf()),
            source: e.into_io_error().unwrap_or_else(|| std::io::Error::other("walk error")),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let is_image = entry
            .path()
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if !is_image {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(first) = files.insert(name.clone(), entry.path().to_path_buf()) {
            return Err(ManifestError::DuplicateImage {
                filename: name,
                first,
                second: entry.path().to_path_buf(),
            });
        }
    }

    let mut diagnostics = Vec::new();
    let mut manifest = DatasetManifest::default();
    for (name, path) in files {
        let light = lights.get(&name).copied();
        let record = match ImageRecord::from_path(path, light) {
            Ok(r) => r,
            Err(error) => {
                diagnostics.push(Diagnostic::InvalidName { filename: name, error });
                continue;
            }
        };
        match by_label.remove(CaptionRecord::primary_label(&name).as_str()) {
            Some(caption) => {
                manifest.captions.insert(name, caption.clone());
                manifest.records.push(record);
            }
            None => diagnostics.push(Diagnostic::OrphanImage { filename: name }),
        }
    }
    let mut leftover: Vec<_> = by_label
        .into_keys()
        .filter(|label| !manifest.captions.contains_key(label.split('#').next().unwrap_or("")))
        .collect();
    leftover.sort_unstable();
    diagnostics.extend(
        leftover
            .into_iter()
            .map(|l| Diagnostic::OrphanCaption { label: l.to_string() }),
    );
    manifest.records.sort_by_key(|r| r.image_index);
    Ok(ManifestBuild { manifest, diagnostics })
}

/// Train/validation split parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Seeded global shuffle, then `round(train_fraction * N)` records go to training.
pub fn split_dataset(manifest: &DatasetManifest, config: &SplitConfig) -> (Vec<ImageRecord>, Vec<ImageRecord>) {
    assert!(
        config.train_fraction > 0.0 && config.train_fraction <= 1.0,
        "train_fraction must lie in (0, 1]"
    );
    let mut records = manifest.records.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    records.shuffle(&mut rng);
    let n_train = ((config.train_fraction * records.len() as f64).round() as usize).min(records.len());
    let val = records.split_off(n_train);
    (records, val)
}

/// Serialized manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub filename: String,
    pub code: u32,
    pub index: u32,
    pub light: Option<LightType>,
    pub caption_label: String,
    pub caption: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDocument {
    pub format: String,
    pub records: Vec<ManifestEntry>,
}

pub const MANIFEST_FORMAT: &str = "petrocap-manifest/1";

impl DatasetManifest {
    pub fn to_document(&self) -> ManifestDocument {
        let records = self
            .records
            .iter()
            .map(|r| {
                let caption = self.captions.get(&r.filename);
                ManifestEntry {
                    filename: r.filename.clone(),
                    code: r.category.code(),
                    index: r.image_index,
                    light: r.light,
                    caption_label: caption
                        .map(|c| c.label.clone())
                        .unwrap_or_else(|| CaptionRecord::primary_label(&r.filename)),
                    caption: caption.map(|c| c.text.clone()).unwrap_or_default(),
                    path: r.path.clone(),
                }
            })
            .collect();
        ManifestDocument {
            format: MANIFEST_FORMAT.to_string(),
            records,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("manifest serializes")
    }

    /// Parses and validates a manifest document; all problems are collected.
    pub fn from_json(text: &str) -> Result<Self, ManifestError> {
        let doc: ManifestDocument = serde_json::from_str(text)?;
        let (manifest, problems) = validate_document(&doc);
        if problems.is_empty() {
            Ok(manifest)
        } else {
            Err(ManifestError::Invalid(problems))
        }
    }
}

/// Checks every entry of a manifest document, returning the entries that
/// passed and the list of offenders.
pub fn validate_document(doc: &ManifestDocument) -> (DatasetManifest, Vec<Diagnostic>) {
    let mut manifest = DatasetManifest::default();
    let mut problems = Vec::new();
    if doc.format != MANIFEST_FORMAT {
        problems.push(Diagnostic::Inconsistent {
            filename: String::new(),
            reason: format!("unsupported format {:?}", doc.format),
        });
    }
    for e in &doc.records {
        let inconsistent = |reason: String| Diagnostic::Inconsistent {
            filename: e.filename.clone(),
            reason,
        };
        let (category, index) = match parse_image_name(&e.filename) {
            Ok(v) => v,
            Err(error) => {
                problems.push(Diagnostic::InvalidName {
                    filename: e.filename.clone(),
                    error,
                });
                continue;
            }
        };
        if category.code() != e.code || index != e.index {
            problems.push(inconsistent(format!(
                "code/index fields ({}, {}) disagree with the name",
                e.code, e.index
            )));
            continue;
        }
        if format_image_name(category, index).as_deref() != Ok(e.filename.as_str()) {
            problems.push(inconsistent("name is not canonical".into()));
            continue;
        }
        let caption = match CaptionRecord::new(e.caption_label.clone(), e.caption.clone()) {
            Ok(c) if c.image_name() == e.filename && c.slot() == 0 => c,
            Ok(_) => {
                problems.push(inconsistent(format!("caption label {:?} is not NAME#0", e.caption_label)));
                continue;
            }
            Err(err) => {
                problems.push(inconsistent(err.to_string()));
                continue;
            }
        };
        if manifest.captions.contains_key(&e.filename) {
            problems.push(inconsistent("duplicate entry".into()));
            continue;
        }
        manifest.captions.insert(e.filename.clone(), caption);
        manifest.records.push(ImageRecord {
            category,
            image_index: index,
            light: e.light,
            path: e.path.clone(),
            filename: e.filename.clone(),
        });
    }
    (manifest, problems)
}

/// Parses a `FILENAME<TAB>PPL|XPL` light sidecar file.
pub fn parse_light_sidecar(text: &str) -> Result<HashMap<String, LightType>, String> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, light) = line
            .split_once('\t')
            .ok_or_else(|| format!("line {}: expected FILENAME<TAB>LIGHT", i + 1))?;
        let light = light.parse().map_err(|e| format!("line {}: {e}", i + 1))?;
        out.insert(name.trim().to_string(), light);
    }
    Ok(out)
}
