//! Corpus layout: category codes, image names, caption files, the caption
//! grammar, manifests, splits and image preparation.

pub mod captions;
pub mod category;
pub mod grammar;
pub mod image;
pub mod manifest;
pub mod naming;

pub use captions::{parse_captions_file, serialize_captions, CaptionRecord, CaptionsError, Charset};
pub use category::{LightType, RockCategory, RockGroup, CORPUS_SIZE, IMAGES_PER_CATEGORY};
pub use grammar::{compose_caption, parameter_applies, CaptionSegments, GrammarError, Parameter, SegmentLabel};
pub use image::{
    apply_augmentation, augment, decode_image, load_image, preprocess_image, AugmentParams,
    AugmentRanges, ImageError, PreparedImage, IMAGE_SIZE,
};
pub use manifest::{
    build_manifest, parse_light_sidecar, split_dataset, validate_document, DatasetManifest, Diagnostic,
    ImageRecord, ManifestBuild, ManifestDocument, ManifestEntry, ManifestError, SplitConfig, MANIFEST_FORMAT,
};
pub use naming::{corpus_names, format_image_name, parse_image_name, NameError};
