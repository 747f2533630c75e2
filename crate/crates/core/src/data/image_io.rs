//! Decoding to `[0,1]` RGB tensors and back to 8-bit images.

use std::io::Cursor;

use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub height: u32,
    pub width: u32,
}

impl PreprocessConfig {
    /// 64×64, the toy-data resolution.
    pub const TOY: PreprocessConfig = PreprocessConfig { height: 64, width: 64 };
    /// 224×224, the usual input size of external CLIP-style encoders.
    pub const EXTERNAL: PreprocessConfig = PreprocessConfig { height: 224, width: 224 };
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self::TOY
    }
}

/// Decodes PNG/JPEG bytes, resizes to the configured resolution (bilinear,
/// only when the size differs) and scales to `[0, 1]` in RGB order.
pub fn preprocess(bytes: &[u8], cfg: &PreprocessConfig) -> Result<ImageTensor> {
    let decoded = image::load_from_memory(bytes).map_err(|e| Error::Format(e.to_string()))?;
    let mut rgb = decoded.to_rgb8();
    if rgb.height() != cfg.height || rgb.width() != cfg.width {
        rgb = image::imageops::resize(&rgb, cfg.width, cfg.height, FilterType::Triangle);
    }
    Ok(rgb_to_tensor(&rgb))
}

pub fn rgb_to_tensor(rgb: &RgbImage) -> ImageTensor {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    ImageTensor::from_fn(3, h, w, |c, i, j| raw[(i * w + j) * 3 + c] as f64 / 255.0)
}

/// Quantizes a 3-channel tensor to 8 bits (round to nearest, clamped).
pub fn tensor_to_rgb(t: &ImageTensor) -> Result<RgbImage> {
    if t.channels() != 3 {
        return Err(Error::Validation(format!(
            "expected 3 channels for RGB output, got {}",
            t.channels()
        )));
    }
    let (h, w) = (t.height(), t.width());
    let mut raw = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                raw.push(quantize(t.get(c, i, j)));
            }
        }
    }
    RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Validation("buffer size mismatch".into()))
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_png(t: &ImageTensor) -> Result<Vec<u8>> {
    let rgb = tensor_to_rgb(t)?;
    let mut out = Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(rgb)
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_png_is_all_ones_at_toy_size() {
        let t = ImageTensor::filled(3, 64, 64, 1.0);
        let png = encode_png(&t).unwrap();
        let back = preprocess(&png, &PreprocessConfig::TOY).unwrap();
        assert_eq!(back.shape(), (3, 64, 64));
        assert!(back.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn resizes_and_is_deterministic() {
        let t = ImageTensor::from_fn(3, 40, 30, |c, i, j| ((c + i * j) % 7) as f64 / 7.0);
        let png = encode_png(&t).unwrap();
        let a = preprocess(&png, &PreprocessConfig::TOY).unwrap();
        let b = preprocess(&png, &PreprocessConfig::TOY).unwrap();
        assert_eq!(a.shape(), (3, 64, 64));
        assert_eq!(a, b);
    }

    #[test]
    fn png_roundtrip_is_lossless_on_8bit_values() {
        let t = ImageTensor::from_fn(3, 8, 8, |c, i, j| ((c * 64 + i * 8 + j) % 256) as f64 / 255.0);
        let back = preprocess(&encode_png(&t).unwrap(), &PreprocessConfig { height: 8, width: 8 }).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn garbage_is_a_format_error() {
        assert!(matches!(
            preprocess(b"not an image", &PreprocessConfig::TOY),
            Err(Error::Format(_))
        ));
    }
}
