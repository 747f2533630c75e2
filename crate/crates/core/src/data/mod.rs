//! Manifests, image loading, perturbations and the synthetic toy corpus.

mod image_io;
mod manifest;
mod oracle;
mod perturb;
mod toy;

pub use image_io::{encode_png, preprocess, rgb_to_tensor, tensor_to_rgb, PreprocessConfig};
pub use manifest::{
    load_manifest, load_manifest_with_root, write_manifest, Label, Manifest, ManifestEntry, REAL_GENERATORS,
};
pub use oracle::{high_band_energy_ratio, ThresholdOracle};
pub use perturb::{gaussian_blur, gaussian_kernel, jpeg_roundtrip, perturb, PerturbationSpec};
pub use toy::{
    generate_toy_dataset, generate_toy_samples, toy_caption, toy_sample, upsample_artifact, ArtifactMode,
    ToyDataset, ToyGenConfig, ToySample, TOY_FAKE_GENERATOR, TOY_REAL_GENERATOR,
};

use std::fs;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoders::CaptionRecord;
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// A decoded, labelled example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: ImageTensor,
    pub caption: CaptionRecord,
    pub label: Label,
}

impl Sample {
    /// An empty manifest caption means "no caption".
    pub fn caption_from_manifest(text: &str) -> CaptionRecord {
        if text.is_empty() {
            CaptionRecord::none()
        } else {
            CaptionRecord::dataset(text)
        }
    }
}

/// Decodes every manifest entry in order.
pub fn load_samples(manifest: &Manifest, cfg: &PreprocessConfig) -> Result<Vec<Sample>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = manifest.resolve(e);
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            let image = preprocess(&bytes, cfg).map_err(|err| match err {
                Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
                other => other,
            })?;
            Ok(Sample {
                image,
                caption: Sample::caption_from_manifest(&e.caption),
                label: e.label,
            })
        })
        .collect()
}

impl From<ToySample> for Sample {
    fn from(s: ToySample) -> Self {
        Sample {
            image: s.image,
            caption: s.caption,
            label: s.label,
        }
    }
}

/// Seeded split that holds out `fraction` of each class. Both index lists
/// are returned in ascending order.
pub fn stratified_split(labels: &[Label], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("holdout fraction must be in [0, 1), got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut held = Vec::new();
    for class in [Label::Real, Label::Fake] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_held = (idx.len() as f64 * fraction).round() as usize;
        held.extend_from_slice(&idx[..n_held]);
        train.extend_from_slice(&idx[n_held..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    Ok((train, held))
}
