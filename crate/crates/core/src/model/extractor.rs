//! Frozen image feature extractors.
//!
//! An extractor turns a [`PreparedImage`] into `P` feature vectors of
//! dimension `D`. Extractors are never trained.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{PreparedImage, IMAGE_SIZE};

use super::ModelError;

pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    /// Number of feature vectors `P` per image.
    fn num_positions(&self) -> usize;
    /// Dimension `D` of each feature vector.
    fn feature_dim(&self) -> usize;
    fn extract(&self, image: &PreparedImage) -> Array2<f32>;
}

pub const STUB_NAME: &str = "stub";

const STUB_GRID: usize = 7;
const STUB_CELLS: usize = 4;

/// Weight-free extractor: the image is cut into a 7 x 7 grid of patches,
/// each patch into 4 x 4 cells, and every cell contributes the mean of R, G,
/// B and squared luminance. That gives 49 positions of 64 features.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubExtractor;

/// `[start, end)` of part `i` when `len` is cut into `parts` nearly equal pieces.
fn bounds(i: usize, parts: usize, start: usize, len: usize) -> (usize, usize) {
    (start + i * len / parts, start + (i + 1) * len / parts)
}

impl FeatureExtractor for StubExtractor {
    fn name(&self) -> &str {
        STUB_NAME
    }

    fn num_positions(&self) -> usize {
        STUB_GRID * STUB_GRID
    }

    fn feature_dim(&self) -> usize {
        STUB_CELLS * STUB_CELLS * 4
    }

    fn extract(&self, image: &PreparedImage) -> Array2<f32> {
        let px = image.pixels();
        let mut out = Array2::zeros((self.num_positions(), self.feature_dim()));
        for pr in 0..STUB_GRID {
            let (y0, y1) = bounds(pr, STUB_GRID, 0, IMAGE_SIZE);
            for pc in 0..STUB_GRID {
                let (x0, x1) = bounds(pc, STUB_GRID, 0, IMAGE_SIZE);
                let mut row = out.row_mut(pr * STUB_GRID + pc);
                for cr in 0..STUB_CELLS {
                    let (cy0, cy1) = bounds(cr, STUB_CELLS, y0, y1 - y0);
                    for cc in 0..STUB_CELLS {
                        let (cx0, cx1) = bounds(cc, STUB_CELLS, x0, x1 - x0);
                        let mut acc = [0f64; 4];
                        for y in cy0..cy1 {
                            for x in cx0..cx1 {
                                let (r, g, b) = (px[[y, x, 0]], px[[y, x, 1]], px[[y, x, 2]]);
                                let lum = 0.299 * r + 0.587 * g + 0.114 * b;
                                acc[0] += r as f64;
                                acc[1] += g as f64;
                                acc[2] += b as f64;
                                acc[3] += (lum * lum) as f64;
                            }
                        }
                        let n = ((cy1 - cy0) * (cx1 - cx0)) as f64;
                        let base = (cr * STUB_CELLS + cc) * 4;
                        for k in 0..4 {
                            row[base + k] = (acc[k] / n) as f32;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Layer of a convolutional backbone description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BackboneLayer {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
}

/// `<name>.json` next to `<name>.safetensors` in a backbone directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    /// Per-channel normalization applied to `[0, 1]` pixels before the first layer.
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub layers: Vec<BackboneLayer>,
    /// Output spatial grid side; the final map is average-pooled to `grid x grid`.
    pub grid: usize,
}

struct ConvWeights {
    /// `out x (in * k * k)`, ordered channel-major then kernel row/col.
    kernel: Array2<f32>,
    bias: Vec<f32>,
}

/// A pretrained convolutional backbone loaded from disk. Its spatial output
/// grid is flattened to `grid * grid` positions.
pub struct ConvBackbone {
    spec: BackboneSpec,
    weights: Vec<Option<ConvWeights>>,
    channels: usize,
}

impl std::fmt::Debug for ConvBackbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConvBackbone").field("spec", &self.spec).finish()
    }
}

impl ConvBackbone {
    /// Loads `<dir>/<name>.json` and `<dir>/<name>.safetensors`.
    pub fn load(dir: &Path, name: &str) -> Result<Self, ModelError> {
        let unavailable = |reason: String| ModelError::ExtractorUnavailable {
            name: name.to_string(),
            reason,
        };
        let spec_path = dir.join(format!("{name}.json"));
        let weights_path = dir.join(format!("{name}.safetensors"));
        let spec_text = std::fs::read_to_string(&spec_path)
            .map_err(|e| unavailable(format!("{}: {e}", spec_path.display())))?;
        let spec: BackboneSpec =
            serde_json::from_str(&spec_text).map_err(|e| unavailable(format!("{}: {e}", spec_path.display())))?;
        let bytes = std::fs::read(&weights_path)
            .map_err(|e| unavailable(format!("{}: {e}", weights_path.display())))?;
        let tensors = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| unavailable(format!("{}: {e}", weights_path.display())))?;

        let mut weights = Vec::with_capacity(spec.layers.len());
        let mut channels = 3;
        for (i, layer) in spec.layers.iter().enumerate() {
            match *layer {
                BackboneLayer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => {
                    if in_channels != channels || stride == 0 || kernel == 0 {
                        return Err(unavailable(format!("layer {i}: inconsistent convolution shape")));
                    }
                    let w = read_f32(&tensors, &format!("layers.{i}.weight"), &[out_channels, in_channels, kernel, kernel])
                        .map_err(&unavailable)?;
                    let b = read_f32(&tensors, &format!("layers.{i}.bias"), &[out_channels]).map_err(&unavailable)?;
                    let kernel = Array2::from_shape_vec((out_channels, in_channels * kernel * kernel), w)
                        .expect("length checked");
                    weights.push(Some(ConvWeights { kernel, bias: b }));
                    channels = out_channels;
                }
                BackboneLayer::MaxPool { size, stride } if size == 0 || stride == 0 => {
                    return Err(unavailable(format!("layer {i}: pool size and stride must be positive")));
                }
                _ => weights.push(None),
            }
        }
        if spec.grid == 0 {
            return Err(unavailable("grid must be positive".into()));
        }
        Ok(Self {
            spec,
            weights,
            channels,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }
}

fn read_f32(tensors: &safetensors::SafeTensors, name: &str, shape: &[usize]) -> Result<Vec<f32>, String> {
    let view = tensors.tensor(name).map_err(|e| format!("{name}: {e}"))?;
    if view.dtype() != safetensors::Dtype::F32 || view.shape() != shape {
        return Err(format!(
            "{name}: expected F32 {shape:?}, found {:?} {:?}",
            view.dtype(),
            view.shape()
        ));
    }
    Ok(view
        .data()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Channel-first convolution by patch unrolling.
fn conv2d(input: &Array3<f32>, w: &ConvWeights, kernel: usize, stride: usize, padding: usize) -> Array3<f32> {
    let (c, h, wd) = input.dim();
    let oh = (h + 2 * padding).saturating_sub(kernel) / stride + 1;
    let ow = (wd + 2 * padding).saturating_sub(kernel) / stride + 1;
    let mut cols = Array2::<f32>::zeros((c * kernel * kernel, oh * ow));
    for ch in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ch * kernel + ky) * kernel + kx;
                let mut dst = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < wd as isize {
                            dst[oy * ow + ox] = input[[ch, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    let mut out = w.kernel.dot(&cols);
    for (mut row, b) in out.rows_mut().into_iter().zip(&w.bias) {
        row.mapv_inplace(|v| v + b);
    }
    out.into_shape_with_order((w.bias.len(), oh, ow)).expect("conv output shape")
}

fn max_pool(input: &Array3<f32>, size: usize, stride: usize) -> Array3<f32> {
    let (c, h, w) = input.dim();
    let oh = h.saturating_sub(size) / stride + 1;
    let ow = w.saturating_sub(size) / stride + 1;
    Array3::from_shape_fn((c, oh, ow), |(ch, y, x)| {
        let y0 = y * stride;
        let x0 = x * stride;
        input
            .slice(s![ch, y0..(y0 + size).min(h), x0..(x0 + size).min(w)])
            .fold(f32::NEG_INFINITY, |m, &v| m.max(v))
    })
}

impl FeatureExtractor for ConvBackbone {
    fn name(&self) -> &str {
        &self.spec.name
    }

    fn num_positions(&self) -> usize {
        self.spec.grid * self.spec.grid
    }

    fn feature_dim(&self) -> usize {
        self.channels
    }

    fn extract(&self, image: &PreparedImage) -> Array2<f32> {
        let mut x = image.pixels().view().permuted_axes([2, 0, 1]).to_owned();
        for (c, mut plane) in x.axis_iter_mut(Axis(0)).enumerate() {
            let (m, sd) = (self.spec.mean[c], self.spec.std[c]);
            plane.mapv_inplace(|v| (v - m) / sd);
        }
        for (layer, w) in self.spec.layers.iter().zip(&self.weights) {
            x = match (layer, w) {
                (BackboneLayer::Conv { kernel, stride, padding, .. }, Some(w)) => {
                    conv2d(&x, w, *kernel, *stride, *padding)
                }
                (BackboneLayer::Relu, _) => x.mapv(|v| v.max(0.0)),
                (BackboneLayer::MaxPool { size, stride }, _) => max_pool(&x, *size, *stride),
                _ => unreachable!("weights are loaded for every convolution"),
            };
        }
        let (c, h, w) = x.dim();
        let grid = self.spec.grid;
        let mut out = Array2::zeros((grid * grid, c));
        for gy in 0..grid {
            let (y0, y1) = bounds(gy, grid, 0, h);
            for gx in 0..grid {
                let (x0, x1) = bounds(gx, grid, 0, w);
                let (y1, x1) = (y1.max(y0 + 1).min(h), x1.max(x0 + 1).min(w));
                let cell = x.slice(s![.., y0..y1, x0..x1]);
                let n = ((y1 - y0) * (x1 - x0)) as f32;
                for ch in 0..c {
                    out[[gy * grid + gx, ch]] = cell.index_axis(Axis(0), ch).sum() / n;
                }
            }
        }
        out
    }
}

/// Resolves an extractor by name: `stub`, or a backbone stored in `backbone_dir`.
pub fn resolve_extractor(name: &str, backbone_dir: Option<&Path>) -> Result<Arc<dyn FeatureExtractor>, ModelError> {
    if name == STUB_NAME {
        return Ok(Arc::new(StubExtractor));
    }
    let dir: PathBuf = match backbone_dir {
        Some(d) => d.to_path_buf(),
        None => {
            return Err(ModelError::ExtractorUnavailable {
                name: name.to_string(),
                reason: "no backbone directory configured".into(),
            })
        }
    };
    Ok(Arc::new(ConvBackbone::load(&dir, name)?))
}
