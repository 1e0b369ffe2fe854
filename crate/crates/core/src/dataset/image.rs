//! Image decoding, resizing and training-time augmentation.
//!
//! Pixels are stored as `f32` in `[0, 1]`, height x width x RGB.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Rgb, Rgb32FImage};
use imageproc::geometric_transformations::{rotate_about_center, Interpolation};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Side length of model input images.
pub const IMAGE_SIZE: usize = 499;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot decode image: {0}")]
    Decode(#[from] image::ImageError),
    #[error("image has zero width or height")]
    Empty,
}

/// A resized, normalized model input of shape 499 x 499 x 3.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedImage {
    pixels: Array3<f32>,
    pub source: String,
}

impl PreparedImage {
    /// Wraps a pixel array. Panics if the shape is not 499 x 499 x 3.
    pub fn from_pixels(pixels: Array3<f32>, source: impl Into<String>) -> Self {
        assert_eq!(pixels.dim(), (IMAGE_SIZE, IMAGE_SIZE, 3), "prepared images are 499x499x3");
        Self {
            pixels: pixels.as_standard_layout().into_owned(),
            source: source.into(),
        }
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    fn to_buffer(&self) -> Rgb32FImage {
        let raw = self.pixels.iter().copied().collect();
        ImageBuffer::from_raw(IMAGE_SIZE as u32, IMAGE_SIZE as u32, raw).expect("shape checked")
    }

    fn from_buffer(buffer: Rgb32FImage, source: String) -> Self {
        let pixels = Array3::from_shape_vec((IMAGE_SIZE, IMAGE_SIZE, 3), buffer.into_raw())
            .expect("buffer is 499x499x3");
        Self { pixels, source }
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<DynamicImage, ImageError> {
    Ok(image::load_from_memory(bytes)?)
}

pub fn load_image(path: &Path) -> Result<DynamicImage, ImageError> {
    Ok(image::open(path)?)
}

/// Converts to RGB in `[0, 1]` and resizes to 499 x 499 with bilinear filtering.
/// Grayscale inputs are replicated across the three channels.
pub fn preprocess_image(raw: &DynamicImage, source: impl Into<String>) -> Result<PreparedImage, ImageError> {
    if raw.width() == 0 || raw.height() == 0 {
        return Err(ImageError::Empty);
    }
    let rgb = raw.to_rgb32f();
    let size = IMAGE_SIZE as u32;
    let resized = if rgb.dimensions() == (size, size) {
        rgb
    } else {
        imageops::resize(&rgb, size, size, FilterType::Triangle)
    };
    let mut prepared = PreparedImage::from_buffer(resized, source.into());
    prepared.pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(prepared)
}

/// Magnitudes of the random augmentation ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentRanges {
    pub max_rotation_deg: f32,
    pub contrast_min: f32,
    pub contrast_max: f32,
    pub flip_probability: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            contrast_min: 0.7,
            contrast_max: 1.3,
            flip_probability: 0.5,
        }
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f32,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub contrast: f32,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rotation_deg: 0.0,
        flip_horizontal: false,
        flip_vertical: false,
        contrast: 1.0,
    };

    pub fn sample(seed: u64, ranges: &AugmentRanges) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            rotation_deg: rng.gen_range(-ranges.max_rotation_deg..=ranges.max_rotation_deg),
            flip_horizontal: rng.gen_bool(ranges.flip_probability),
            flip_vertical: rng.gen_bool(ranges.flip_probability),
            contrast: rng.gen_range(ranges.contrast_min..=ranges.contrast_max),
        }
    }
}

/// Random rotation, flips and contrast with the default ranges, drawn from `seed`.
pub fn augment(image: &PreparedImage, seed: u64) -> PreparedImage {
    apply_augmentation(image, &AugmentParams::sample(seed, &AugmentRanges::default()))
}

pub fn apply_augmentation(image: &PreparedImage, params: &AugmentParams) -> PreparedImage {
    if *params == AugmentParams::IDENTITY {
        return image.clone();
    }
    let mut buf = image.to_buffer();
    if params.rotation_deg != 0.0 {
        // Corners uncovered by the rotation are filled with black.
        buf = rotate_about_center(
            &buf,
            params.rotation_deg.to_radians(),
            Interpolation::Bilinear,
            Rgb([0.0, 0.0, 0.0]),
        );
    }
    if params.flip_horizontal {
        imageops::flip_horizontal_in_place(&mut buf);
    }
    if params.flip_vertical {
        imageops::flip_vertical_in_place(&mut buf);
    }
    let mut out = PreparedImage::from_buffer(buf, image.source.clone());
    if params.contrast != 1.0 {
        adjust_contrast(&mut out.pixels, params.contrast);
    }
    out.pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// `(x - mean) * factor + mean` per channel.
fn adjust_contrast(pixels: &mut Array3<f32>, factor: f32) {
    let n = (pixels.dim().0 * pixels.dim().1) as f64;
    for c in 0..3 {
        let mut channel = pixels.index_axis_mut(ndarray::Axis(2), c);
        let mean = (channel.iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
        channel.mapv_inplace(|v| (v - mean) * factor + mean);
    }
}
