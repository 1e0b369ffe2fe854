//! Captioning model: frozen feature extractor, transformer encoder/decoder,
//! greedy generation and on-disk artifacts.

mod artifact;
mod extractor;
mod layers;
mod params;
mod transformer;

#[cfg(test)]
mod tests;

use std::sync::Arc;

use thiserror::Error;

use crate::dataset::PreparedImage;
use crate::text::{detokenize_ids, TextConfig, Vocabulary};

pub use artifact::{load_model, save_model, ArchitectureDescriptor, ARCHITECTURE_FILE, VOCAB_FILE, WEIGHTS_FILE};
pub use extractor::{
    resolve_extractor, BackboneLayer, BackboneSpec, ConvBackbone, FeatureExtractor, StubExtractor, STUB_NAME,
};
pub use layers::Mode;
pub use params::{Grads, ParamId, ParamStore};
pub use transformer::{AttentionTrace, DecoderOutput, EncoderContext, ModelConfig, SampleStats, Transformer};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature extractor '{name}' is unavailable: {reason}")]
    ExtractorUnavailable { name: String, reason: String },
    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("{0} contain non-finite values")]
    NonFinite(&'static str),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("model artifact: {0}")]
    Artifact(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Everything needed to caption an image. Immutable once built, so it can
/// be shared between threads.
pub struct CaptionerModel {
    pub name: String,
    pub transformer: Transformer,
    pub vocab: Vocabulary,
    pub text: TextConfig,
    pub extractor: Arc<dyn FeatureExtractor>,
}

impl std::fmt::Debug for CaptionerModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CaptionerModel")
            .field("name", &self.name)
            .field("extractor", &self.extractor.name())
            .field("transformer", &self.transformer)
            .finish()
    }
}

impl CaptionerModel {
    /// Fresh model whose shapes match `extractor` and `vocab`.
    pub fn new(
        name: impl Into<String>,
        config: ModelConfig,
        vocab: Vocabulary,
        extractor: Arc<dyn FeatureExtractor>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if vocab.len() > config.vocab_size {
            return Err(ModelError::InvalidConfig(format!(
                "vocabulary has {} tokens but vocab_size is {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let text = TextConfig {
            vocab_size: config.vocab_size,
            seq_len: config.seq_len,
        };
        let transformer = Transformer::new(config, extractor.feature_dim(), seed)?;
        Ok(Self {
            name: name.into(),
            transformer,
            vocab,
            text,
            extractor,
        })
    }

    pub fn extract_features(&self, image: &PreparedImage) -> ndarray::Array2<f32> {
        self.extractor.extract(image)
    }

    pub fn caption_features(&self, features: &ndarray::Array2<f32>, max_len: usize) -> Result<String, ModelError> {
        let ctx = self.transformer.encode(features, &mut Mode::Inference)?;
        let ids = self.transformer.generate_ids(&ctx, max_len)?;
        Ok(detokenize_ids(&ids, &self.vocab))
    }

    /// Greedy caption for an image.
    pub fn generate_caption(&self, image: &PreparedImage, max_len: usize) -> Result<String, ModelError> {
        self.caption_features(&self.extract_features(image), max_len)
    }
}
