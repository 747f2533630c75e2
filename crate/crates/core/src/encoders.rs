//! Text and image encoders behind a pluggable interface.
//!
//! Encoders are frozen: they are constructed once and only read afterwards.
//! Two backends exist. `stub` is a deterministic, dependency-free encoder
//! used for hermetic runs:
//!
//! * image: per-channel means over a 4×4 grid of blocks, shifted by -0.5,
//!   with a constant 1 appended, multiplied by a seeded Gaussian matrix and
//!   L2-normalized;
//! * text: lower-cased alphanumeric tokens, each hashed together with the
//!   seed (SHA-256) into the seed of a Gaussian vector; the vectors are summed
//!   and L2-normalized.
//!
//! `external` looks up an adapter registered under `encoder.model_ref` in an
//! [`EncoderRegistry`]. No weights are bundled, so an unregistered reference
//! is an [`Error::EncoderUnavailable`], never a silent fallback to the stub.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::ImageTensor;

pub const STUB_DIM: usize = 64;
const STUB_GRID: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Stub,
    External,
    Absent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub provenance: Provenance,
}

impl TextEmbedding {
    /// Zero vector used when no caption is available.
    pub fn absent(dim: usize) -> Self {
        Self {
            vector: vec![0.0; dim],
            provenance: Provenance::Absent,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    pub vector: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    Dataset,
    Generated,
    #[default]
    None,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    text: String,
    source: CaptionSource,
}

impl CaptionRecord {
    pub fn new(text: impl Into<String>, source: CaptionSource) -> Result<Self> {
        let text = text.into();
        if source == CaptionSource::None && !text.is_empty() {
            return Err(Error::Validation(
                "a caption with source `none` must be empty".into(),
            ));
        }
        Ok(Self { text, source })
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn dataset(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            source: CaptionSource::Dataset,
        }
    }

    pub fn generated(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            source: CaptionSource::Generated,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn source(&self) -> CaptionSource {
        self.source
    }
}

pub trait ImageEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_image(&self, img: &ImageTensor) -> Result<ImageEmbedding>;
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_text(&self, caption: &CaptionRecord) -> Result<TextEmbedding>;
}

pub trait CaptionProvider: Send + Sync {
    fn caption(&self, img: &ImageTensor) -> Result<CaptionRecord>;
}

fn l2_normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::Validation("embedding has zero or non-finite norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

fn gaussian_vector(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Seeded random projection of coarse block statistics.
#[derive(Clone, Debug)]
pub struct StubImageEncoder {
    dim: usize,
    channels: usize,
    /// `dim × (channels·grid² + 1)`
    projection: Vec<f64>,
}

impl StubImageEncoder {
    pub fn new(seed: u64, dim: usize, channels: usize) -> Self {
        let n_stats = channels * STUB_GRID * STUB_GRID + 1;
        let projection = gaussian_vector(seed ^ 0x696d_6167_655f_656e, dim * n_stats);
        Self {
            dim,
            channels,
            projection,
        }
    }

    /// The statistics the projection sees. Any perturbation that leaves these
    /// unchanged leaves the embedding unchanged.
    pub fn block_statistics(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        if img.channels() != self.channels {
            return Err(Error::Validation(format!(
                "stub image encoder built for {} channels, got {}",
                self.channels,
                img.channels()
            )));
        }
        let pooled = nn::adaptive_avg_pool(img, STUB_GRID, STUB_GRID);
        let mut stats: Vec<f64> = pooled.as_slice().iter().map(|v| v - 0.5).collect();
        stats.push(1.0);
        Ok(stats)
    }
}

impl ImageEncoder for StubImageEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_image(&self, img: &ImageTensor) -> Result<ImageEmbedding> {
        let stats = self.block_statistics(img)?;
        let raw = self
            .projection
            .chunks_exact(stats.len())
            .map(|row| row.iter().zip(&stats).map(|(a, b)| a * b).sum())
            .collect();
        Ok(ImageEmbedding {
            vector: l2_normalize(raw)?,
            provenance: Provenance::Stub,
        })
    }
}

/// Bag of hashed-token Gaussian vectors.
#[derive(Clone, Debug)]
pub struct StubTextEncoder {
    seed: u64,
    dim: usize,
}

impl StubTextEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }

    pub fn tokens(text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    fn token_seed(&self, token: &str) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}

impl TextEncoder for StubTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, caption: &CaptionRecord) -> Result<TextEmbedding> {
        if caption.source() == CaptionSource::None {
            return Ok(TextEmbedding::absent(self.dim));
        }
        let mut tokens = Self::tokens(caption.text());
        if tokens.is_empty() {
            tokens.push("<empty>".into());
        }
        let mut acc = vec![0.0; self.dim];
        for t in &tokens {
            for (a, g) in acc.iter_mut().zip(gaussian_vector(self.token_seed(t), self.dim)) {
                *a += g;
            }
        }
        Ok(TextEmbedding {
            vector: l2_normalize(acc)?,
            provenance: Provenance::Stub,
        })
    }
}

/// Template captions from the dominant hue bucket of an RGB image:
/// `"synthetic texture class k"`.
#[derive(Clone, Debug)]
pub struct HueCaptionProvider {
    pub buckets: usize,
}

impl Default for HueCaptionProvider {
    fn default() -> Self {
        Self { buckets: 6 }
    }
}

impl HueCaptionProvider {
    /// Hue histogram over chromatic pixels; ties go to the lower bucket and an
    /// achromatic image falls in bucket 0.
    pub fn dominant_bucket(&self, img: &ImageTensor) -> Result<usize> {
        if img.channels() != 3 {
            return Err(Error::Validation(format!(
                "hue captions need an RGB image, got {} channels",
                img.channels()
            )));
        }
        let mut counts = vec![0usize; self.buckets.max(1)];
        let n = img.plane_len();
        let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
        for k in 0..n {
            if let Some(h) = hue_degrees(r[k], g[k], b[k]) {
                let bucket = ((h / 360.0 * counts.len() as f64) as usize).min(counts.len() - 1);
                counts[bucket] += 1;
            }
        }
        let (best, _) = counts
            .iter()
            .enumerate()
            .fold((0, 0), |(bi, bc), (i, &c)| if c > bc { (i, c) } else { (bi, bc) });
        Ok(best)
    }
}

fn hue_degrees(r: f64, g: f64, b: f64) -> Option<f64> {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 1e-12 {
        return None;
    }
    let h = if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    Some(h.rem_euclid(360.0))
}

impl CaptionProvider for HueCaptionProvider {
    fn caption(&self, img: &ImageTensor) -> Result<CaptionRecord> {
        let k = self.dominant_bucket(img)?;
        Ok(CaptionRecord::generated(format!("synthetic texture class {k}")))
    }
}

/// Provider used when captioning is switched off.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoCaptionProvider;

impl CaptionProvider for NoCaptionProvider {
    fn caption(&self, _img: &ImageTensor) -> Result<CaptionRecord> {
        Ok(CaptionRecord::none())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderBackend {
    #[default]
    Stub,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub backend: EncoderBackend,
    /// Name of a registered external adapter.
    pub model_ref: Option<String>,
    /// Stub only: seed of the random projections.
    pub seed: u64,
    /// Stub only: embedding width for both modalities.
    pub dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backend: EncoderBackend::Stub,
            model_ref: None,
            seed: 0x5eed,
            dim: STUB_DIM,
        }
    }
}

/// An externally provided encoder pair sharing one embedding space.
#[derive(Clone)]
pub struct ExternalBackend {
    pub image: Arc<dyn ImageEncoder>,
    pub text: Arc<dyn TextEncoder>,
    pub captions: Option<Arc<dyn CaptionProvider>>,
}

/// Named external adapters available to [`EncoderSet::from_config`].
#[derive(Clone, Default)]
pub struct EncoderRegistry {
    backends: BTreeMap<String, ExternalBackend>,
}

impl EncoderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, backend: ExternalBackend) {
        self.backends.insert(name.into(), backend);
    }

    pub fn get(&self, name: &str) -> Option<&ExternalBackend> {
        self.backends.get(name)
    }
}

/// The encoders a detector reads from. Outputs are re-validated here so every
/// non-absent embedding is finite and unit-norm regardless of backend.
#[derive(Clone)]
pub struct EncoderSet {
    image: Arc<dyn ImageEncoder>,
    text: Arc<dyn TextEncoder>,
    captions: Arc<dyn CaptionProvider>,
    provenance: Provenance,
}

impl std::fmt::Debug for EncoderSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderSet")
            .field("provenance", &self.provenance)
            .field("image_dim", &self.image.dim())
            .field("text_dim", &self.text.dim())
            .finish()
    }
}

impl EncoderSet {
    pub fn stub(seed: u64, dim: usize) -> Self {
        Self {
            image: Arc::new(StubImageEncoder::new(seed, dim, 3)),
            text: Arc::new(StubTextEncoder::new(seed, dim)),
            captions: Arc::new(HueCaptionProvider::default()),
            provenance: Provenance::Stub,
        }
    }

    pub fn from_config(cfg: &EncoderConfig, registry: &EncoderRegistry) -> Result<Self> {
        match cfg.backend {
            EncoderBackend::Stub => {
                if cfg.dim == 0 {
                    return Err(Error::Config("encoder.dim must be positive".into()));
                }
                Ok(Self::stub(cfg.seed, cfg.dim))
            }
            EncoderBackend::External => {
                let name = cfg.model_ref.as_deref().ok_or_else(|| {
                    Error::EncoderUnavailable("encoder.backend=external needs encoder.model_ref".into())
                })?;
                let backend = registry.get(name).ok_or_else(|| {
                    Error::EncoderUnavailable(format!("no external encoder registered as `{name}`"))
                })?;
                let (di, dt) = (backend.image.dim(), backend.text.dim());
                if di != dt {
                    return Err(Error::Config(format!(
                        "external encoder `{name}` reports image dim {di} but text dim {dt}"
                    )));
                }
                let captions = backend.captions.clone().ok_or_else(|| {
                    Error::ProviderUnavailable(format!("external encoder `{name}` has no caption provider"))
                });
                Ok(Self {
                    image: backend.image.clone(),
                    text: backend.text.clone(),
                    // A missing provider only fails when a caption is actually requested.
                    captions: match captions {
                        Ok(c) => c,
                        Err(e) => Arc::new(UnavailableProvider(e.to_string())),
                    },
                    provenance: Provenance::External,
                })
            }
        }
    }

    pub fn image_dim(&self) -> usize {
        self.image.dim()
    }

    pub fn text_dim(&self) -> usize {
        self.text.dim()
    }

    pub fn encode_image(&self, img: &ImageTensor) -> Result<ImageEmbedding> {
        let emb = self.image.encode_image(img)?;
        let vector = checked(emb.vector, self.image.dim())?;
        Ok(ImageEmbedding {
            vector: l2_normalize(vector)?,
            provenance: self.provenance,
        })
    }

    pub fn encode_text(&self, caption: &CaptionRecord) -> Result<TextEmbedding> {
        if caption.source() == CaptionSource::None {
            return Ok(TextEmbedding::absent(self.text.dim()));
        }
        let emb = self.text.encode_text(caption)?;
        let vector = checked(emb.vector, self.text.dim())?;
        Ok(TextEmbedding {
            vector: l2_normalize(vector)?,
            provenance: self.provenance,
        })
    }

    pub fn caption(&self, img: &ImageTensor) -> Result<CaptionRecord> {
        self.captions.caption(img)
    }
}

fn checked(v: Vec<f64>, dim: usize) -> Result<Vec<f64>> {
    if v.len() != dim {
        return Err(Error::Validation(format!(
            "encoder returned {} values, reported dim is {dim}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation("encoder returned non-finite values".into()));
    }
    Ok(v)
}

struct UnavailableProvider(String);

impl CaptionProvider for UnavailableProvider {
    fn caption(&self, _img: &ImageTensor) -> Result<CaptionRecord> {
        Err(Error::ProviderUnavailable(self.0.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(3, 16, 16, |_, _, _| rng.random_range(0.0..1.0))
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn stub_image_embedding_is_unit_norm_and_deterministic() {
        let enc = EncoderSet::stub(1, 64);
        let img = random_image(3);
        let a = enc.encode_image(&img).unwrap();
        let b = EncoderSet::stub(1, 64).encode_image(&img).unwrap();
        assert!((norm(&a.vector) - 1.0).abs() < 1e-6);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.vector), bits(&b.vector));
        assert_eq!(a.provenance, Provenance::Stub);
    }

    #[test]
    fn one_pixel_changes_the_image_embedding() {
        let enc = StubImageEncoder::new(1, 64, 3);
        let img = random_image(4);
        let mut other = img.clone();
        other.set(1, 5, 7, img.get(1, 5, 7) + 0.01);
        let a = enc.encode_image(&img).unwrap();
        let b = enc.encode_image(&other).unwrap();
        assert_ne!(a.vector, b.vector);

        // recompute the embedding by hand from its definition
        let stats = enc.block_statistics(&other).unwrap();
        let raw: Vec<f64> = (0..64)
            .map(|r| (0..stats.len()).map(|k| enc.projection[r * stats.len() + k] * stats[k]).sum())
            .collect();
        let n = norm(&raw);
        for (x, y) in raw.iter().zip(&b.vector) {
            assert!((x / n - y).abs() < 1e-12);
        }
    }

    #[test]
    fn block_preserving_edit_keeps_embedding() {
        let enc = StubImageEncoder::new(1, 64, 3);
        let img = random_image(5);
        let mut other = img.clone();
        // same 4x4 block, opposite offsets
        other.set(0, 0, 0, img.get(0, 0, 0) + 0.05);
        other.set(0, 1, 1, img.get(0, 1, 1) - 0.05);
        let a = enc.encode_image(&img).unwrap();
        let b = enc.encode_image(&other).unwrap();
        for (x, y) in a.vector.iter().zip(&b.vector) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn text_absent_and_determinism() {
        let enc = EncoderSet::stub(2, 64);
        let none = enc.encode_text(&CaptionRecord::none()).unwrap();
        assert_eq!(none.provenance, Provenance::Absent);
        assert!(none.vector.iter().all(|&v| v == 0.0));

        let a = enc.encode_text(&CaptionRecord::dataset("a dog")).unwrap();
        let b = enc.encode_text(&CaptionRecord::dataset("a dog")).unwrap();
        let c = enc.encode_text(&CaptionRecord::dataset("a cat")).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.vector, c.vector);
        assert!((norm(&a.vector) - 1.0).abs() < 1e-6);
        let empty = enc.encode_text(&CaptionRecord::dataset("")).unwrap();
        assert!((norm(&empty.vector) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn text_embedding_recomputed_from_token_hashes() {
        let enc = StubTextEncoder::new(9, 8);
        let got = enc.encode_text(&CaptionRecord::dataset("A cat, a Dog")).unwrap();
        assert_eq!(StubTextEncoder::tokens("A cat, a Dog"), vec!["a", "cat", "a", "dog"]);
        let mut acc = vec![0.0; 8];
        for t in ["a", "cat", "a", "dog"] {
            let mut h = Sha256::new();
            h.update(9u64.to_le_bytes());
            h.update(t.as_bytes());
            let seed = u64::from_le_bytes(h.finalize()[..8].try_into().unwrap());
            for (a, g) in acc.iter_mut().zip(gaussian_vector(seed, 8)) {
                *a += g;
            }
        }
        let n = norm(&acc);
        for (x, y) in acc.iter().zip(&got.vector) {
            assert!((x / n - y).abs() < 1e-12);
        }
    }

    #[test]
    fn caption_record_none_must_be_empty() {
        assert!(CaptionRecord::new("text", CaptionSource::None).is_err());
        assert!(CaptionRecord::new("", CaptionSource::None).is_ok());
    }

    #[test]
    fn hue_captions() {
        let provider = HueCaptionProvider::default();
        // pure green sits at 120 degrees -> bucket 2 of 6
        let green = ImageTensor::from_fn(3, 4, 4, |c, _, _| if c == 1 { 0.9 } else { 0.1 });
        let cap = provider.caption(&green).unwrap();
        assert_eq!(cap.text(), "synthetic texture class 2");
        assert_eq!(cap.source(), CaptionSource::Generated);
        assert_eq!(provider.caption(&green).unwrap(), cap);
        let grey = ImageTensor::filled(3, 4, 4, 0.5);
        assert_eq!(provider.dominant_bucket(&grey).unwrap(), 0);
        assert_eq!(NoCaptionProvider.caption(&green).unwrap(), CaptionRecord::none());
    }

    struct Fixed(usize);
    impl ImageEncoder for Fixed {
        fn dim(&self) -> usize {
            self.0
        }
        fn encode_image(&self, _img: &ImageTensor) -> Result<ImageEmbedding> {
            Ok(ImageEmbedding { vector: vec![2.0; self.0], provenance: Provenance::External })
        }
    }
    impl TextEncoder for Fixed {
        fn dim(&self) -> usize {
            self.0
        }
        fn encode_text(&self, _c: &CaptionRecord) -> Result<TextEmbedding> {
            Ok(TextEmbedding { vector: vec![1.0; self.0], provenance: Provenance::External })
        }
    }

    #[test]
    fn external_backend_resolution() {
        let cfg = EncoderConfig {
            backend: EncoderBackend::External,
            model_ref: Some("clip-vit-b32".into()),
            ..Default::default()
        };
        let empty = EncoderRegistry::new();
        assert!(matches!(EncoderSet::from_config(&cfg, &empty), Err(Error::EncoderUnavailable(_))));

        let mut reg = EncoderRegistry::new();
        reg.register(
            "clip-vit-b32",
            ExternalBackend { image: Arc::new(Fixed(4)), text: Arc::new(Fixed(5)), captions: None },
        );
        assert!(matches!(EncoderSet::from_config(&cfg, &reg), Err(Error::Config(_))));

        reg.register(
            "clip-vit-b32",
            ExternalBackend { image: Arc::new(Fixed(4)), text: Arc::new(Fixed(4)), captions: None },
        );
        let set = EncoderSet::from_config(&cfg, &reg).unwrap();
        let e = set.encode_image(&ImageTensor::zeros(3, 2, 2)).unwrap();
        assert_eq!(e.provenance, Provenance::External);
        assert!((norm(&e.vector) - 1.0).abs() < 1e-12);
        assert!(matches!(set.caption(&ImageTensor::zeros(3, 2, 2)), Err(Error::ProviderUnavailable(_))));
    }
}
