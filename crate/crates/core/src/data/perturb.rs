//! Evaluation-time degradations: JPEG re-compression and Gaussian blur.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{GrayImage, ImageFormat};
use serde::{Deserialize, Serialize};

use super::image_io::{quantize, rgb_to_tensor, tensor_to_rgb};
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationSpec {
    None,
    Jpeg { quality: u8 },
    GaussianBlur { sigma: f64 },
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PerturbationSpec::None => Ok(()),
            PerturbationSpec::Jpeg { quality } if (1..=100).contains(&quality) => Ok(()),
            PerturbationSpec::Jpeg { quality } => Err(Error::Validation(format!(
                "JPEG quality must be in 1..=100, got {quality}"
            ))),
            PerturbationSpec::GaussianBlur { sigma } if sigma.is_finite() && sigma > 0.0 => Ok(()),
            PerturbationSpec::GaussianBlur { sigma } => Err(Error::Validation(format!(
                "blur sigma must be positive, got {sigma}"
            ))),
        }
    }

    /// Report column name: `Ori`, `JPEG80`, `Gauss1`, ...
    pub fn label(&self) -> String {
        match *self {
            PerturbationSpec::None => "Ori".into(),
            PerturbationSpec::Jpeg { quality } => format!("JPEG{quality}"),
            PerturbationSpec::GaussianBlur { sigma } => format!("Gauss{sigma}"),
        }
    }

    /// `{none, jpeg 80, jpeg 50, blur 1, blur 2}`.
    pub fn default_grid() -> Vec<PerturbationSpec> {
        vec![
            PerturbationSpec::None,
            PerturbationSpec::Jpeg { quality: 80 },
            PerturbationSpec::Jpeg { quality: 50 },
            PerturbationSpec::GaussianBlur { sigma: 1.0 },
            PerturbationSpec::GaussianBlur { sigma: 2.0 },
        ]
    }
}

pub fn perturb(img: &ImageTensor, spec: &PerturbationSpec) -> Result<ImageTensor> {
    spec.validate()?;
    match *spec {
        PerturbationSpec::None => Ok(img.clone()),
        PerturbationSpec::Jpeg { quality } => jpeg_roundtrip(img, quality),
        PerturbationSpec::GaussianBlur { sigma } => Ok(gaussian_blur(img, sigma)),
    }
}

/// Encodes through a baseline JPEG codec at `quality` and decodes back.
/// Accepts RGB or single-channel tensors.
pub fn jpeg_roundtrip(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let mut buf = Cursor::new(Vec::new());
    let mut encoder = JpegEncoder::new_with_quality(&mut buf, quality);
    let codec_err = |e: image::ImageError| Error::Format(e.to_string());
    match img.channels() {
        3 => {
            let rgb = tensor_to_rgb(img)?;
            encoder.encode_image(&rgb).map_err(codec_err)?;
            let decoded = image::load_from_memory_with_format(buf.get_ref(), ImageFormat::Jpeg)
                .map_err(codec_err)?;
            Ok(rgb_to_tensor(&decoded.to_rgb8()))
        }
        1 => {
            let (h, w) = (img.height(), img.width());
            let raw = img.as_slice().iter().map(|&v| quantize(v)).collect();
            let gray = GrayImage::from_raw(w as u32, h as u32, raw)
                .ok_or_else(|| Error::Validation("buffer size mismatch".into()))?;
            encoder.encode_image(&gray).map_err(codec_err)?;
            let decoded = image::load_from_memory_with_format(buf.get_ref(), ImageFormat::Jpeg)
                .map_err(codec_err)?
                .to_luma8();
            let data = decoded.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            ImageTensor::new(1, h, w, data)
        }
        c => Err(Error::Validation(format!("JPEG needs 1 or 3 channels, got {c}"))),
    }
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

// Half-sample symmetric extension: ... c b a | a b c ... | c b a ...
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian blur with symmetric (edge-repeating) reflection.
///
/// The symmetric extension is periodic with period `2N` and has the same mean
/// as the image, so the blur preserves mean brightness.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> ImageTensor {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (c, h, w) = img.shape();
    let mut tmp = ImageTensor::zeros(c, h, w);
    for ch in 0..c {
        let src = img.channel(ch);
        let dst = tmp.channel_mut(ch);
        for i in 0..h {
            let row = &src[i * w..(i + 1) * w];
            for j in 0..w {
                dst[i * w + j] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * row[reflect(j as isize + k as isize - radius, w)])
                    .sum();
            }
        }
    }
    let mut out = ImageTensor::zeros(c, h, w);
    for ch in 0..c {
        let src = tmp.channel(ch);
        let dst = out.channel_mut(ch);
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * src[reflect(i as isize + k as isize - radius, h) * w + j])
                    .sum();
            }
        }
    }
    out
}
