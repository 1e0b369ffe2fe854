//! TOML pipeline configuration shared by `build-vocab` and `train`.
//!
//! ```toml
//! [text]
//! vocab_size = 300
//! seq_len = 60
//!
//! [model]          # any ModelConfig field except vocab_size/seq_len
//! embed_dim = 512
//!
//! [train]          # any TrainConfig field
//! epochs = 50
//!
//! [split]
//! train_fraction = 0.8
//! seed = 0
//! ```

use anyhow::bail;
use serde::Deserialize;

use petrocap_core::dataset::SplitConfig;
use petrocap_core::model::ModelConfig;
use petrocap_core::text::TextConfig;
use petrocap_core::training::TrainConfig;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub embed_dim: Option<usize>,
    pub ff_dim: Option<usize>,
    pub enc_heads: Option<usize>,
    pub dec_heads: Option<usize>,
    pub attn_dropout_enc: Option<f64>,
    pub attn_dropout_dec: Option<f64>,
    pub dense_dropout_1: Option<f64>,
    pub dense_dropout_2: Option<f64>,
    pub num_enc_blocks: Option<usize>,
    pub num_dec_blocks: Option<usize>,
    pub init_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let d = SplitConfig::default();
        Self {
            train_fraction: d.train_fraction,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub text: TextConfig,
    pub model: ModelOverrides,
    pub train: TrainConfig,
    pub split: SplitSection,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.text.validate()?;
        cfg.train.validate()?;
        cfg.model_config().validate()?;
        if !(cfg.split.train_fraction > 0.0 && cfg.split.train_fraction < 1.0) {
            bail!("split.train_fraction must lie strictly between 0 and 1");
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        let base = ModelConfig::with_text(&self.text);
        let m = &self.model;
        ModelConfig {
            embed_dim: m.embed_dim.unwrap_or(base.embed_dim),
            ff_dim: m.ff_dim.unwrap_or(base.ff_dim),
            enc_heads: m.enc_heads.unwrap_or(base.enc_heads),
            dec_heads: m.dec_heads.unwrap_or(base.dec_heads),
            attn_dropout_enc: m.attn_dropout_enc.unwrap_or(base.attn_dropout_enc),
            attn_dropout_dec: m.attn_dropout_dec.unwrap_or(base.attn_dropout_dec),
            dense_dropout_1: m.dense_dropout_1.unwrap_or(base.dense_dropout_1),
            dense_dropout_2: m.dense_dropout_2.unwrap_or(base.dense_dropout_2),
            num_enc_blocks: m.num_enc_blocks.unwrap_or(base.num_enc_blocks),
            num_dec_blocks: m.num_dec_blocks.unwrap_or(base.num_dec_blocks),
            ..base
        }
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            train_fraction: self.split.train_fraction,
            seed: self.split.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_defaults() {
        let cfg = PipelineConfig::parse("").unwrap();
        assert_eq!(cfg.model_config(), ModelConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.split_config(), SplitConfig::default());
    }

    #[test]
    fn sections_override_fields() {
        let cfg = PipelineConfig::parse(
            "[text]\nvocab_size = 120\nseq_len = 30\n[model]\nembed_dim = 64\nff_dim = 32\n[train]\nepochs = 3\naugment = false\n[split]\nseed = 9\n",
        )
        .unwrap();
        let m = cfg.model_config();
        assert_eq!((m.embed_dim, m.ff_dim, m.vocab_size, m.seq_len), (64, 32, 120, 30));
        assert_eq!(cfg.train.epochs, 3);
        assert!(!cfg.train.augment);
        assert_eq!(cfg.split.seed, 9);
        assert_eq!(cfg.split.train_fraction, 0.8);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(PipelineConfig::parse("[model]\nembeddim = 3\n").is_err());
        assert!(PipelineConfig::parse("[model]\nembed_dim = 10\ndec_heads = 3\n").is_err());
        assert!(PipelineConfig::parse("[train]\nbatch_size = 0\n").is_err());
        assert!(PipelineConfig::parse("[split]\ntrain_fraction = 1.0\n").is_err());
        assert!(PipelineConfig::parse("[text]\nvocab_size = 2\n").is_err());
    }
}
