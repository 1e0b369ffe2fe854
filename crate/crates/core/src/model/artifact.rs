//! Model directory layout: `architecture.json`, `vocab.txt` and
//! `weights.safetensors` (F64 tensors keyed by parameter name).

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::text::{TextConfig, Vocabulary};

use super::{resolve_extractor, CaptionerModel, FeatureExtractor, ModelConfig, ModelError, ParamStore, Transformer};

pub const ARCHITECTURE_FILE: &str = "architecture.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const WEIGHTS_FILE: &str = "weights.safetensors";
const FORMAT: &str = "petrocap-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub format: String,
    pub model_name: String,
    pub extractor: String,
    pub feature_positions: usize,
    pub feature_dim: usize,
    pub model: ModelConfig,
    pub text: TextConfig,
    pub vocabulary: String,
    pub weights: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_model(model: &CaptionerModel, dir: &Path) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let descriptor = ArchitectureDescriptor {
        format: FORMAT.into(),
        model_name: model.name.clone(),
        extractor: model.extractor.name().to_string(),
        feature_positions: model.extractor.num_positions(),
        feature_dim: model.extractor.feature_dim(),
        model: model.transformer.config().clone(),
        text: model.text,
        vocabulary: VOCAB_FILE.into(),
        weights: WEIGHTS_FILE.into(),
    };
    let arch_path = dir.join(ARCHITECTURE_FILE);
    let json = serde_json::to_string_pretty(&descriptor).expect("descriptor serializes");
    std::fs::write(&arch_path, json).map_err(io_err(&arch_path))?;
    let vocab_path = dir.join(VOCAB_FILE);
    std::fs::write(&vocab_path, model.vocab.to_text()).map_err(io_err(&vocab_path))?;
    let weights_path = dir.join(WEIGHTS_FILE);
    std::fs::write(&weights_path, serialize_params(model.transformer.params())).map_err(io_err(&weights_path))?;
    Ok(())
}

pub(crate) fn serialize_params(params: &ParamStore) -> Vec<u8> {
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = params
        .iter()
        .map(|(name, v)| {
            let bytes = v.iter().flat_map(|x| x.to_le_bytes()).collect();
            (name.to_string(), vec![v.nrows(), v.ncols()], bytes)
        })
        .collect();
    let views: HashMap<String, safetensors::tensor::TensorView> = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            let view = safetensors::tensor::TensorView::new(safetensors::Dtype::F64, shape.clone(), bytes)
                .expect("shape matches buffer");
            (name.clone(), view)
        })
        .collect();
    safetensors::serialize(views, &None).expect("safetensors serialization")
}

pub(crate) fn deserialize_params(bytes: &[u8]) -> Result<ParamStore, ModelError> {
    let tensors = safetensors::SafeTensors::deserialize(bytes).map_err(|e| ModelError::Artifact(e.to_string()))?;
    let mut store = ParamStore::new();
    let mut names = tensors.names();
    names.sort();
    for name in names {
        let view = tensors.tensor(name).map_err(|e| ModelError::Artifact(e.to_string()))?;
        let shape = view.shape();
        if view.dtype() != safetensors::Dtype::F64 || shape.len() != 2 {
            return Err(ModelError::Artifact(format!(
                "tensor {name}: expected 2-d F64, found {:?} {:?}",
                view.dtype(),
                shape
            )));
        }
        let data: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Array2::from_shape_vec((shape[0], shape[1]), data).map_err(|e| ModelError::Artifact(e.to_string()))?;
        store.add(name.clone(), value);
    }
    Ok(store)
}

/// Loads a model directory. The extractor named in the descriptor is
/// resolved with `backbone_dir`, unless `extractor` overrides it.
pub fn load_model(
    dir: &Path,
    backbone_dir: Option<&Path>,
    extractor: Option<Arc<dyn FeatureExtractor>>,
) -> Result<CaptionerModel, ModelError> {
    let arch_path = dir.join(ARCHITECTURE_FILE);
    let text = std::fs::read_to_string(&arch_path).map_err(io_err(&arch_path))?;
    let d: ArchitectureDescriptor =
        serde_json::from_str(&text).map_err(|e| ModelError::Artifact(format!("{}: {e}", arch_path.display())))?;
    if d.format != FORMAT {
        return Err(ModelError::Artifact(format!("unsupported format '{}'", d.format)));
    }
    let extractor = match extractor {
        Some(e) => e,
        None => resolve_extractor(&d.extractor, backbone_dir)?,
    };
    if extractor.feature_dim() != d.feature_dim {
        return Err(ModelError::DimensionMismatch {
            what: "extractor feature dimension",
            expected: d.feature_dim.to_string(),
            found: extractor.feature_dim().to_string(),
        });
    }
    let vocab_path = dir.join(&d.vocabulary);
    let vocab_text = std::fs::read_to_string(&vocab_path).map_err(io_err(&vocab_path))?;
    let vocab = Vocabulary::from_text(&vocab_text).map_err(|e| ModelError::Artifact(e.to_string()))?;
    let weights_path = dir.join(&d.weights);
    let bytes = std::fs::read(&weights_path).map_err(io_err(&weights_path))?;
    let params = deserialize_params(&bytes)?;
    let mut transformer = Transformer::new(d.model, d.feature_dim, 0)?;
    transformer.load_params(&params)?;
    Ok(CaptionerModel {
        name: d.model_name,
        transformer,
        vocab,
        text: d.text,
        extractor,
    })
}
