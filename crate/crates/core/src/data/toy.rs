//! Synthetic real/fake texture pairs with an injected up-sampling artifact.
//!
//! Real images are per-channel `1/r^beta` noise synthesized in the DCT
//! domain (`r = sqrt(u^2 + v^2)` in coefficient units), standardized to a
//! fixed contrast around a random per-channel mean and clipped to `[0, 1]`.
//! Fake images start from the same kind of texture, are box-averaged to half
//! resolution and brought back with 2× nearest-neighbour up-sampling. Box
//! averaging keeps every even-aligned block mean, so coarse colour/layout
//! statistics carry no class signal; only the high band differs.
//!
//! Captions come from a fixed template list and are shared by the real and
//! fake image with the same index, so they carry no class signal either.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::image_io::encode_png;
use super::manifest::{write_manifest, Label, ManifestEntry};
use crate::encoders::CaptionRecord;
use crate::error::{Error, Result};
use crate::spectral::{idct2, DctConvention, DctSpectrum};
use crate::tensor::{ImageTensor, Plane};

pub const TOY_REAL_GENERATOR: &str = "toy-real";
pub const TOY_FAKE_GENERATOR: &str = "toy";

const CAPTION_TEMPLATES: [&str; 8] = [
    "a close-up photo of a textured surface",
    "an abstract pattern with soft colors",
    "a grainy picture of a painted wall",
    "a macro shot of fabric",
    "clouds of color blending together",
    "a blurry photo of foliage",
    "a stone surface under daylight",
    "a colorful noise pattern",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactMode {
    #[default]
    Upsample2x,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyGenConfig {
    pub count_per_class: usize,
    /// Square image side in pixels; must be even.
    pub size: usize,
    /// Exponent `beta` of the `1/r^beta` coefficient envelope.
    pub spectral_exponent: f64,
    /// Per-channel standard deviation before clipping.
    pub contrast: f64,
    pub artifact: ArtifactMode,
    pub seed: u64,
}

impl Default for ToyGenConfig {
    fn default() -> Self {
        Self {
            count_per_class: 1000,
            size: 64,
            spectral_exponent: 0.8,
            contrast: 0.15,
            artifact: ArtifactMode::Upsample2x,
            seed: 2024,
        }
    }
}

impl ToyGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count_per_class == 0 {
            return Err(Error::Config("count_per_class must be at least 1".into()));
        }
        if self.size < 16 || self.size % 2 != 0 {
            return Err(Error::Config(format!(
                "image size must be even and at least 16, got {}",
                self.size
            )));
        }
        if !(self.spectral_exponent.is_finite() && self.contrast.is_finite() && self.contrast > 0.0) {
            return Err(Error::Config("spectral_exponent and contrast must be finite, contrast positive".into()));
        }
        Ok(())
    }
}

/// One generated image before it is written to disk. Pixel values are
/// already quantized to 8 bits, so they match what a loader will read back.
#[derive(Clone, Debug)]
pub struct ToySample {
    pub index: usize,
    pub label: Label,
    pub image: ImageTensor,
    pub caption: CaptionRecord,
}

fn texture_channel(rng: &mut ChaCha8Rng, size: usize, beta: f64, contrast: f64) -> Result<Plane> {
    let coeffs = Plane::from_fn(size, size, |u, v| {
        let z: f64 = StandardNormal.sample(rng);
        if u == 0 && v == 0 {
            0.0
        } else {
            z / ((u * u + v * v) as f64).powf(beta / 2.0)
        }
    });
    let plane = idct2(&DctSpectrum::new(coeffs, DctConvention::Orthonormal), DctConvention::Orthonormal)?;
    let n = (size * size) as f64;
    let mean = plane.as_slice().iter().sum::<f64>() / n;
    let std = (plane.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let level: f64 = rng.random_range(0.3..0.7);
    let data = plane
        .as_slice()
        .iter()
        .map(|v| ((v - mean) / std.max(1e-12) * contrast + level).clamp(0.0, 1.0))
        .collect();
    Plane::new(size, size, data)
}

/// Box-average to half size, then repeat every pixel 2×2.
pub fn upsample_artifact(plane: &Plane) -> Plane {
    let (h, w) = (plane.height(), plane.width());
    Plane::from_fn(h, w, |i, j| {
        let (bi, bj) = (i / 2 * 2, j / 2 * 2);
        (plane.get(bi, bj) + plane.get(bi + 1, bj) + plane.get(bi, bj + 1) + plane.get(bi + 1, bj + 1)) / 4.0
    })
}

fn quantized(plane: Plane) -> Plane {
    let (h, w) = (plane.height(), plane.width());
    let data = plane
        .into_vec()
        .into_iter()
        .map(|v| (v * 255.0).round() / 255.0)
        .collect();
    Plane::new(h, w, data).expect("shape unchanged")
}

pub fn toy_caption(seed: u64, index: usize) -> String {
    CAPTION_TEMPLATES[(index + seed as usize) % CAPTION_TEMPLATES.len()].to_string()
}

/// Generates one sample; each (class, index) pair has its own RNG stream.
pub fn toy_sample(cfg: &ToyGenConfig, label: Label, index: usize) -> Result<ToySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let class = match label {
        Label::Real => 0,
        Label::Fake => 1,
    };
    rng.set_stream(index as u64 * 2 + class);
    let mut planes = Vec::with_capacity(3);
    for _ in 0..3 {
        let tex = texture_channel(&mut rng, cfg.size, cfg.spectral_exponent, cfg.contrast)?;
        let tex = match (label, cfg.artifact) {
            (Label::Real, _) => tex,
            (Label::Fake, ArtifactMode::Upsample2x) => upsample_artifact(&tex),
        };
        planes.push(quantized(tex));
    }
    Ok(ToySample {
        index,
        label,
        image: ImageTensor::from_planes(&planes)?,
        caption: CaptionRecord::dataset(toy_caption(cfg.seed, index)),
    })
}

/// All samples in manifest order: real 0, fake 0, real 1, fake 1, ...
pub fn generate_toy_samples(cfg: &ToyGenConfig) -> Result<Vec<ToySample>> {
    cfg.validate()?;
    use rayon::prelude::*;
    (0..cfg.count_per_class * 2)
        .into_par_iter()
        .map(|k| {
            let label = if k % 2 == 0 { Label::Real } else { Label::Fake };
            toy_sample(cfg, label, k / 2)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub manifest_path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Writes `real/NNNNNN.png`, `fake/NNNNNN.png` and `manifest.jsonl` under `out_dir`.
pub fn generate_toy_dataset(cfg: &ToyGenConfig, out_dir: impl AsRef<Path>) -> Result<ToyDataset> {
    let out_dir = out_dir.as_ref();
    let samples = generate_toy_samples(cfg)?;
    for sub in ["real", "fake"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for s in &samples {
        let (dir, generator) = match s.label {
            Label::Real => ("real", TOY_REAL_GENERATOR),
            Label::Fake => ("fake", TOY_FAKE_GENERATOR),
        };
        let rel = format!("{dir}/{:06}.png", s.index);
        let path = out_dir.join(&rel);
        fs::write(&path, encode_png(&s.image)?).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            image_path: rel,
            caption: s.caption.text().to_string(),
            label: s.label,
            generator: generator.to_string(),
        });
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    write_manifest(&manifest_path, &entries)?;
    Ok(ToyDataset {
        manifest_path,
        entries,
    })
}
