//! End-to-end detector.
//!
//! ```text
//! image ─┬─ image encoder ───────────────────────────────┐
//!        └─ conv(3→C,s2)─ReLU─conv(C→C,s2)─ReLU ─ MCAF ─ GAP ─ linear(C→D_f) ─┤ concat ─ MLP ─ logit
//! caption ─ text encoder ────────────────────────────────┘
//! ```
//!
//! The fusion vector is laid out `[text | image | frequency]`. Encoders are
//! frozen, so training only touches the extractor, MCAF, projection and head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Label, PreprocessConfig, Sample};
use crate::encoders::{
    CaptionRecord, EncoderConfig, EncoderRegistry, EncoderSet, ImageEmbedding, TextEmbedding,
};
use crate::error::{Error, Result};
use crate::mcaf::{mcaf_apply, Mcaf, McafConfig, McafState, McafTrace};
use crate::nn::{self, Conv2d, Linear};
use crate::tensor::ImageTensor;

/// What the MCAF branch reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchInput {
    /// Output of the two-layer convolutional extractor.
    #[default]
    FeatureMap,
    /// The RGB image itself (C = 3, no extractor).
    RawRgb,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Zero the frequency slot.
    pub disable_frequency: bool,
    /// Zero the text slot.
    pub disable_caption: bool,
    /// Replace dataset captions with captions from the caption provider.
    pub caption_generated: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.disable_caption && self.caption_generated {
            return Err(Error::Config(
                "disable_caption and caption_generated are mutually exclusive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input: PreprocessConfig,
    pub branch_input: BranchInput,
    pub conv_channels: usize,
    pub kernel: usize,
    pub mcaf: McafConfig,
    /// Width of the projected frequency feature.
    pub freq_dim: usize,
    pub hidden_dim: usize,
    pub encoder: EncoderConfig,
    /// Scores at or above this value are labelled fake.
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_channels(16, PreprocessConfig::TOY)
    }
}

impl ModelConfig {
    pub fn with_channels(channels: usize, input: PreprocessConfig) -> Self {
        Self {
            input,
            branch_input: BranchInput::FeatureMap,
            conv_channels: channels,
            kernel: 3,
            mcaf: McafConfig::for_channels(channels),
            freq_dim: 64,
            hidden_dim: 128,
            encoder: EncoderConfig::default(),
            threshold: 0.5,
        }
    }

    /// C = 8 on 16×16 inputs, for gradient checks.
    pub fn tiny() -> Self {
        Self::with_channels(8, PreprocessConfig { height: 16, width: 16 })
    }

    /// The MCAF branch reading the image directly.
    pub fn raw_rgb(input: PreprocessConfig) -> Self {
        Self {
            branch_input: BranchInput::RawRgb,
            mcaf: McafConfig::for_channels(3),
            ..Self::with_channels(16, input)
        }
    }

    pub fn branch_channels(&self) -> usize {
        match self.branch_input {
            BranchInput::FeatureMap => self.conv_channels,
            BranchInput::RawRgb => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.height == 0 || self.input.width == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        if self.branch_input == BranchInput::FeatureMap && (self.conv_channels == 0 || self.kernel == 0) {
            return Err(Error::Config("conv_channels and kernel must be positive".into()));
        }
        if self.mcaf.channels != self.branch_channels() {
            return Err(Error::Config(format!(
                "mcaf.channels is {} but the branch produces {} channels",
                self.mcaf.channels,
                self.branch_channels()
            )));
        }
        self.mcaf.validate()?;
        if self.freq_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("freq_dim and hidden_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must be in [0, 1], got {}", self.threshold)));
        }
        Ok(())
    }
}

/// `[text | image | frequency]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionFeature {
    pub vector: Vec<f64>,
    pub text_dim: usize,
    pub image_dim: usize,
    pub freq_dim: usize,
}

impl FusionFeature {
    pub fn text(&self) -> &[f64] {
        &self.vector[..self.text_dim]
    }

    pub fn image(&self) -> &[f64] {
        &self.vector[self.text_dim..self.text_dim + self.image_dim]
    }

    pub fn frequency(&self) -> &[f64] {
        &self.vector[self.text_dim + self.image_dim..]
    }
}

/// A parameter tensor as seen by checkpoints and optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    /// Two conv layers, or none in raw-RGB mode.
    pub extractor: Vec<Conv2d>,
    pub mcaf: McafState,
    pub proj: Linear,
    pub head1: Linear,
    pub head2: Linear,
}

impl DetectorParams {
    pub fn zeros(cfg: &ModelConfig, text_dim: usize, image_dim: usize) -> Self {
        let c = cfg.conv_channels;
        let pad = cfg.kernel / 2;
        let extractor = match cfg.branch_input {
            BranchInput::FeatureMap => vec![
                Conv2d::zeros(3, c, cfg.kernel, 2, pad),
                Conv2d::zeros(c, c, cfg.kernel, 2, pad),
            ],
            BranchInput::RawRgb => Vec::new(),
        };
        Self {
            extractor,
            mcaf: McafState::zeros(&cfg.mcaf),
            proj: Linear::zeros(cfg.branch_channels(), cfg.freq_dim),
            head1: Linear::zeros(text_dim + image_dim + cfg.freq_dim, cfg.hidden_dim),
            head2: Linear::zeros(cfg.hidden_dim, 1),
        }
    }

    pub fn init(cfg: &ModelConfig, text_dim: usize, image_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(cfg, text_dim, image_dim);
        for layer in &mut p.extractor {
            *layer = Conv2d::init(
                layer.in_channels,
                layer.out_channels,
                layer.kernel,
                layer.stride,
                layer.padding,
                rng,
            );
        }
        p.mcaf = McafState::init(&cfg.mcaf, rng);
        p.proj = Linear::init(p.proj.in_dim, p.proj.out_dim, rng);
        p.head1 = Linear::init(p.head1.in_dim, p.head1.out_dim, rng);
        p.head2 = Linear::init_xavier(p.head2.in_dim, 1, rng);
        p
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Every tensor in a fixed order with a stable name.
    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        for (k, conv) in self.extractor.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("extractor.{k}.weight"),
                shape: vec![conv.out_channels, conv.in_channels, conv.kernel, conv.kernel],
                data: &conv.weight,
            });
            out.push(NamedTensor {
                name: format!("extractor.{k}.bias"),
                shape: vec![conv.out_channels],
                data: &conv.bias,
            });
        }
        push_linear(&mut out, "mcaf.fc1", &self.mcaf.fc1);
        if let Some(fc2) = &self.mcaf.fc2 {
            push_linear(&mut out, "mcaf.fc2", fc2);
        }
        if !self.mcaf.nas_alphas.is_empty() {
            out.push(NamedTensor {
                name: "mcaf.nas_alpha".into(),
                shape: vec![self.mcaf.nas_alphas.len()],
                data: &self.mcaf.nas_alphas,
            });
        }
        push_linear(&mut out, "proj", &self.proj);
        push_linear(&mut out, "head.0", &self.head1);
        push_linear(&mut out, "head.1", &self.head2);
        out
    }

    /// Mutable views in the same order as [`DetectorParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let DetectorParams {
            extractor,
            mcaf,
            proj,
            head1,
            head2,
        } = self;
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (k, conv) in extractor.iter_mut().enumerate() {
            out.push((format!("extractor.{k}.weight"), &mut conv.weight));
            out.push((format!("extractor.{k}.bias"), &mut conv.bias));
        }
        out.push(("mcaf.fc1.weight".into(), &mut mcaf.fc1.weight));
        out.push(("mcaf.fc1.bias".into(), &mut mcaf.fc1.bias));
        if let Some(fc2) = mcaf.fc2.as_mut() {
            out.push(("mcaf.fc2.weight".into(), &mut fc2.weight));
            out.push(("mcaf.fc2.bias".into(), &mut fc2.bias));
        }
        if !mcaf.nas_alphas.is_empty() {
            out.push(("mcaf.nas_alpha".into(), &mut mcaf.nas_alphas));
        }
        for (prefix, l) in [("proj", proj), ("head.0", head1), ("head.1", head2)] {
            out.push((format!("{prefix}.weight"), &mut l.weight));
            out.push((format!("{prefix}.bias"), &mut l.bias));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &DetectorParams) {
        let src = other.tensors();
        for ((_, dst), s) in self.tensors_mut().into_iter().zip(src) {
            dst.iter_mut().zip(s.data).for_each(|(d, v)| *d += v);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

fn push_linear<'a>(out: &mut Vec<NamedTensor<'a>>, prefix: &str, l: &'a Linear) {
    out.push(NamedTensor {
        name: format!("{prefix}.weight"),
        shape: vec![l.out_dim, l.in_dim],
        data: &l.weight,
    });
    out.push(NamedTensor {
        name: format!("{prefix}.bias"),
        shape: vec![l.out_dim],
        data: &l.bias,
    });
}

/// Frozen-encoder outputs for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub text: TextEmbedding,
    pub image: ImageEmbedding,
}

#[derive(Clone, Debug)]
struct BranchTrace {
    input: ImageTensor,
    /// Per conv layer: pre-activation output.
    conv_pre: Vec<ImageTensor>,
    feature: ImageTensor,
    attention: Vec<f64>,
    mcaf: McafTrace,
    pooled: Vec<f64>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    branch: Option<BranchTrace>,
    pub fusion: FusionFeature,
    head_pre: Vec<f64>,
    head_hidden: Vec<f64>,
    pub logit: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub score: f64,
}

impl Prediction {
    /// `fake` iff `sigmoid(logit) >= threshold`.
    pub fn from_logit(logit: f64, threshold: f64) -> Self {
        let score = nn::sigmoid(logit);
        let label = if score >= threshold { Label::Fake } else { Label::Real };
        Self { label, score }
    }
}

/// Binary cross-entropy on a logit, target 0 (real) or 1 (fake).
pub fn bce_with_logits(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// `d bce / d logit = sigmoid(logit) - target`.
pub fn bce_grad(logit: f64, target: f64) -> f64 {
    nn::sigmoid(logit) - target
}

#[derive(Clone, Debug)]
pub struct DetectorModel {
    config: ModelConfig,
    ablation: AblationFlags,
    params: DetectorParams,
    mcaf: Mcaf,
    encoders: EncoderSet,
}

impl DetectorModel {
    /// Assembles a model from explicit parameters after checking every shape.
    pub fn new(
        config: ModelConfig,
        ablation: AblationFlags,
        params: DetectorParams,
        registry: &EncoderRegistry,
    ) -> Result<Self> {
        config.validate()?;
        ablation.validate()?;
        let encoders = EncoderSet::from_config(&config.encoder, registry)?;
        let template = DetectorParams::zeros(&config, encoders.text_dim(), encoders.image_dim());
        let shapes = |p: &DetectorParams| -> Vec<(String, Vec<usize>)> {
            p.tensors().into_iter().map(|t| (t.name, t.shape)).collect()
        };
        if shapes(&params) != shapes(&template) {
            return Err(Error::Validation("parameter shapes do not match the model config".into()));
        }
        let geometry = |c: &Conv2d| (c.kernel, c.stride, c.padding);
        if params.extractor.iter().map(geometry).ne(template.extractor.iter().map(geometry)) {
            return Err(Error::Validation("conv geometry does not match the model config".into()));
        }
        for t in params.tensors() {
            let expected: usize = t.shape.iter().product();
            if t.data.len() != expected || t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("tensor {} is malformed", t.name)));
            }
        }
        params.mcaf.validate(&config.mcaf)?;
        let mcaf = Mcaf::new(config.mcaf.clone())?;
        Ok(Self {
            config,
            ablation,
            params,
            mcaf,
            encoders,
        })
    }

    /// Seeded random initialization.
    pub fn init(config: ModelConfig, ablation: AblationFlags, seed: u64, registry: &EncoderRegistry) -> Result<Self> {
        config.validate()?;
        let encoders = EncoderSet::from_config(&config.encoder, registry)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = DetectorParams::init(&config, encoders.text_dim(), encoders.image_dim(), &mut rng);
        Self::new(config, ablation, params, registry)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ablation(&self) -> AblationFlags {
        self.ablation
    }

    pub fn params(&self) -> &DetectorParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut DetectorParams {
        &mut self.params
    }

    pub fn mcaf(&self) -> &Mcaf {
        &self.mcaf
    }

    pub fn encoders(&self) -> &EncoderSet {
        &self.encoders
    }

    fn check_image(&self, img: &ImageTensor) -> Result<()> {
        let want = (3, self.config.input.height as usize, self.config.input.width as usize);
        if img.shape() != want {
            return Err(Error::Validation(format!(
                "expected a {:?} image, got {:?}",
                want,
                img.shape()
            )));
        }
        Ok(())
    }

    /// Frozen embeddings with the caption ablations applied.
    pub fn embed(&self, img: &ImageTensor, caption: &CaptionRecord) -> Result<Embeddings> {
        self.check_image(img)?;
        let text = if self.ablation.disable_caption {
            TextEmbedding::absent(self.encoders.text_dim())
        } else if self.ablation.caption_generated {
            self.encoders.encode_text(&self.encoders.caption(img)?)?
        } else {
            self.encoders.encode_text(caption)?
        };
        Ok(Embeddings {
            text,
            image: self.encoders.encode_image(img)?,
        })
    }

    pub fn fusion_feature(&self, img: &ImageTensor, emb: &Embeddings) -> Result<FusionFeature> {
        Ok(self.forward_embedded(img, emb)?.fusion)
    }

    fn branch_forward(&self, img: &ImageTensor) -> Result<(Vec<f64>, BranchTrace)> {
        let mut conv_pre = Vec::with_capacity(self.params.extractor.len());
        let mut feature = img.clone();
        for conv in &self.params.extractor {
            let pre = conv.forward(&feature)?;
            feature = nn::relu_tensor(&pre);
            conv_pre.push(pre);
        }
        let (attention, mcaf_trace) = self.mcaf.forward(&feature, &self.params.mcaf)?;
        let pooled = nn::global_avg_pool(&mcaf_apply(&feature, &attention)?);
        let projected = self.params.proj.forward(&pooled)?;
        Ok((
            projected,
            BranchTrace {
                input: img.clone(),
                conv_pre,
                feature,
                attention: attention.into_vec(),
                mcaf: mcaf_trace,
                pooled,
            },
        ))
    }

    /// Logit and trace from precomputed embeddings.
    pub fn forward_embedded(&self, img: &ImageTensor, emb: &Embeddings) -> Result<ForwardTrace> {
        self.check_image(img)?;
        let (dt, di, df) = (self.encoders.text_dim(), self.encoders.image_dim(), self.config.freq_dim);
        if emb.text.vector.len() != dt || emb.image.vector.len() != di {
            return Err(Error::Validation("embedding widths do not match the encoders".into()));
        }
        let (freq, branch) = if self.ablation.disable_frequency {
            (vec![0.0; df], None)
        } else {
            let (f, b) = self.branch_forward(img)?;
            (f, Some(b))
        };
        let mut vector = Vec::with_capacity(dt + di + df);
        vector.extend_from_slice(&emb.text.vector);
        vector.extend_from_slice(&emb.image.vector);
        vector.extend_from_slice(&freq);
        let fusion = FusionFeature {
            vector,
            text_dim: dt,
            image_dim: di,
            freq_dim: df,
        };
        let head_pre = self.params.head1.forward(&fusion.vector)?;
        let head_hidden = nn::relu_vec(&head_pre);
        let logit = self.params.head2.forward(&head_hidden)?[0];
        Ok(ForwardTrace {
            branch,
            fusion,
            head_pre,
            head_hidden,
            logit,
        })
    }

    pub fn forward(&self, img: &ImageTensor, caption: &CaptionRecord) -> Result<f64> {
        let emb = self.embed(img, caption)?;
        Ok(self.forward_embedded(img, &emb)?.logit)
    }

    /// Gradient of a loss with `dL/dlogit = grad_logit` w.r.t. every parameter.
    pub fn backward(&self, trace: &ForwardTrace, grad_logit: f64) -> DetectorParams {
        let p = &self.params;
        let mut grad = p.zeros_like();
        let mut d_hidden = p.head2.backward(&trace.head_hidden, &[grad_logit], &mut grad.head2);
        nn::relu_backward(&trace.head_pre, &mut d_hidden);
        let d_fusion = p.head1.backward(&trace.fusion.vector, &d_hidden, &mut grad.head1);
        let Some(b) = &trace.branch else {
            return grad;
        };
        let offset = trace.fusion.text_dim + trace.fusion.image_dim;
        let d_pooled = p.proj.backward(&b.pooled, &d_fusion[offset..], &mut grad.proj);

        // pooled[c] = a[c] * mean(feature[c])
        let (c, h, w) = b.feature.shape();
        let hw = (h * w) as f64;
        let mut d_feature = ImageTensor::zeros(c, h, w);
        let mut d_attention = vec![0.0; c];
        for ch in 0..c {
            let mean = b.feature.channel(ch).iter().sum::<f64>() / hw;
            d_attention[ch] = d_pooled[ch] * mean;
            let g = d_pooled[ch] * b.attention[ch] / hw;
            d_feature.channel_mut(ch).iter_mut().for_each(|v| *v = g);
        }
        let via_gate = self.mcaf.backward(&p.mcaf, &b.mcaf, &d_attention, &mut grad.mcaf);
        d_feature
            .as_mut_slice()
            .iter_mut()
            .zip(via_gate.as_slice())
            .for_each(|(d, v)| *d += v);

        let mut d_out = d_feature;
        for k in (0..p.extractor.len()).rev() {
            nn::relu_backward(b.conv_pre[k].as_slice(), d_out.as_mut_slice());
            d_out = if k == 0 {
                p.extractor[0].backward(&b.input, &d_out, &mut grad.extractor[0])
            } else {
                let x = nn::relu_tensor(&b.conv_pre[k - 1]);
                p.extractor[k].backward(&x, &d_out, &mut grad.extractor[k])
            };
        }
        grad
    }

    pub fn predict(&self, img: &ImageTensor, caption: &CaptionRecord) -> Result<Prediction> {
        Ok(Prediction::from_logit(self.forward(img, caption)?, self.config.threshold))
    }

    /// One prediction per sample, in input order.
    pub fn predict_batch(&self, samples: &[Sample]) -> Result<Vec<Prediction>> {
        samples
            .par_iter()
            .map(|s| self.predict(&s.image, &s.caption))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Stochastic gradient descent with heavy-ball momentum.
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// SGD only.
    pub momentum: f64,
    /// Samples in the fixed batch used to compare loss before and after training.
    pub probe_size: usize,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 5,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            probe_size: 64,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.probe_size == 0 {
            return Err(Error::Config("batch_size, epochs and probe_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        self.ablation.validate()
    }
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(cfg: &TrainConfig, params: &DetectorParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
            step: 0,
            second: zeros.clone(),
            first: zeros,
        }
    }

    fn apply(&mut self, params: &mut DetectorParams, grad: &DetectorParams) {
        self.step += 1;
        let grads = grad.tensors();
        let bc1 = 1.0 - Self::BETA1.powi(self.step);
        let bc2 = 1.0 - Self::BETA2.powi(self.step);
        for (k, ((_, p), g)) in params.tensors_mut().into_iter().zip(&grads).enumerate() {
            let m = &mut self.first[k];
            match self.kind {
                OptimizerKind::Sgd => {
                    for i in 0..p.len() {
                        m[i] = self.momentum * m[i] + g.data[i];
                        p[i] -= self.lr * m[i];
                    }
                }
                OptimizerKind::Adam => {
                    let v = &mut self.second[k];
                    for i in 0..p.len() {
                        let gi = g.data[i];
                        m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * gi;
                        v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * gi * gi;
                        p[i] -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + Self::EPS);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DetectorModel,
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn mean_loss(model: &DetectorModel, samples: &[Sample], embs: &[Embeddings], idx: &[usize]) -> Result<f64> {
    let losses = idx
        .par_iter()
        .map(|&i| {
            let t = model.forward_embedded(&samples[i].image, &embs[i])?;
            Ok(bce_with_logits(t.logit, samples[i].label.target()))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / idx.len() as f64)
}

pub fn train(samples: &[Sample], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_registry(samples, model_cfg, cfg, &EncoderRegistry::new())
}

/// Mini-batch training with a mean BCE loss. Per-sample gradients are
/// computed in parallel and summed in sample order, so results do not depend
/// on the thread count.
pub fn train_with_registry(
    samples: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    registry: &EncoderRegistry,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let fakes = samples.iter().filter(|s| s.label == Label::Fake).count();
    if fakes == 0 || fakes == samples.len() {
        return Err(Error::Config("training set must contain both real and fake samples".into()));
    }
    let mut model = DetectorModel::init(model_cfg.clone(), cfg.ablation, cfg.seed, registry)?;
    let embs = samples
        .par_iter()
        .map(|s| model.embed(&s.image, &s.caption))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let probe: Vec<usize> = {
        use rand::seq::SliceRandom;
        let mut p = order.clone();
        p.shuffle(&mut rng);
        p.truncate(cfg.probe_size);
        p
    };
    let initial_probe_loss = mean_loss(&model, samples, &embs, &probe)?;
    let mut optimizer = Optimizer::new(cfg, model.params());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample = batch
                .par_iter()
                .map(|&i| {
                    let trace = model.forward_embedded(&samples[i].image, &embs[i])?;
                    let y = samples[i].label.target();
                    Ok((bce_with_logits(trace.logit, y), model.backward(&trace, bce_grad(trace.logit, y))))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grad = model.params().zeros_like();
            for (loss, g) in &per_sample {
                epoch_loss += loss;
                grad.add_assign(g);
            }
            grad.scale(1.0 / batch.len() as f64);
            optimizer.apply(model.params_mut(), &grad);
        }
        if !model.params().is_finite() {
            return Err(Error::Validation(format!("parameters diverged in epoch {epoch}")));
        }
        let mean = epoch_loss / samples.len() as f64;
        log::info!("epoch {} loss {:.6}", epoch + 1, mean);
        epoch_losses.push(mean);
    }
    let final_probe_loss = mean_loss(&model, samples, &embs, &probe)?;
    Ok(TrainOutcome {
        model,
        initial_probe_loss,
        final_probe_loss,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcaf::Criterion;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(3, h, w, |_, _, _| rng.random_range(0.0..1.0))
    }

    fn tiny(ablation: AblationFlags) -> DetectorModel {
        DetectorModel::init(ModelConfig::tiny(), ablation, 7, &EncoderRegistry::new()).unwrap()
    }

    #[test]
    fn bce_examples() {
        assert!((bce_with_logits(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_with_logits(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_with_logits(800.0, 1.0) < 1e-300);
        assert!(bce_with_logits(-3.0, 1.0) > 0.0);
        for &(z, y) in &[(0.3, 1.0), (-2.0, 0.0), (5.0, 0.0), (-0.7, 1.0)] {
            let h = 1e-5;
            let fd = (bce_with_logits(z + h, y) - bce_with_logits(z - h, y)) / (2.0 * h);
            let g = bce_grad(z, y);
            assert!((fd - g).abs() / g.abs() < 1e-6, "z={z} y={y}");
        }
    }

    #[test]
    fn prediction_threshold_edge() {
        let p = Prediction::from_logit(0.0, 0.5);
        assert_eq!(p.score, 0.5);
        assert_eq!(p.label, Label::Fake);
        assert_eq!(Prediction::from_logit(-1e-9, 0.5).label, Label::Real);
        let scores: Vec<f64> = (-20..=20).map(|z| Prediction::from_logit(z as f64 / 4.0, 0.5).score).collect();
        assert!(scores.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn fusion_layout_and_dims() {
        let m = tiny(AblationFlags::default());
        let img = random_image(1, 16, 16);
        let emb = m.embed(&img, &CaptionRecord::dataset("a cat")).unwrap();
        let f = m.fusion_feature(&img, &emb).unwrap();
        assert_eq!(f.vector.len(), 64 + 64 + 64);
        assert_eq!(f.text(), &emb.text.vector[..]);
        assert_eq!(f.image(), &emb.image.vector[..]);
        assert!(f.frequency().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn ablations_zero_their_slot() {
        let img = random_image(2, 16, 16);
        let cap = CaptionRecord::dataset("a dog");
        let m = tiny(AblationFlags { disable_frequency: true, ..Default::default() });
        let f = m.fusion_feature(&img, &m.embed(&img, &cap).unwrap()).unwrap();
        assert!(f.frequency().iter().all(|v| *v == 0.0));
        let m = tiny(AblationFlags { disable_caption: true, ..Default::default() });
        let emb = m.embed(&img, &cap).unwrap();
        assert_eq!(emb.text.provenance, crate::encoders::Provenance::Absent);
        assert!(m.fusion_feature(&img, &emb).unwrap().text().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn generated_caption_ignores_dataset_caption() {
        let img = random_image(3, 16, 16);
        let m = tiny(AblationFlags { caption_generated: true, ..Default::default() });
        let a = m.embed(&img, &CaptionRecord::dataset("one")).unwrap();
        let b = m.embed(&img, &CaptionRecord::dataset("two")).unwrap();
        assert_eq!(a, b);
        assert!(AblationFlags { caption_generated: true, disable_caption: true, ..Default::default() }
            .validate()
            .is_err());
    }

    #[test]
    fn zero_head_scores_one_half() {
        let mut m = tiny(AblationFlags::default());
        let p = m.params_mut();
        p.head1 = Linear::zeros(p.head1.in_dim, p.head1.out_dim);
        p.head2 = Linear::zeros(p.head2.in_dim, 1);
        for s in 0..5 {
            let pred = m.predict(&random_image(s, 16, 16), &CaptionRecord::dataset("x")).unwrap();
            assert_eq!(pred.score, 0.5);
        }
    }

    #[test]
    fn wrong_image_shape_is_validation_error() {
        let m = tiny(AblationFlags::default());
        assert!(matches!(
            m.forward(&random_image(0, 17, 16), &CaptionRecord::none()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn shape_mismatch_rejected_on_assembly() {
        let m = tiny(AblationFlags::default());
        let mut params = m.params().clone();
        params.proj = Linear::zeros(8, 63);
        assert!(DetectorModel::new(ModelConfig::tiny(), AblationFlags::default(), params, &EncoderRegistry::new()).is_err());
        let mut cfg = ModelConfig::tiny();
        cfg.mcaf.channels = 16;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn tensor_names_are_unique_and_cover_all_params() {
        let mut cfg = ModelConfig::tiny();
        cfg.mcaf.criterion = Criterion::Nas;
        let m = DetectorModel::init(cfg, AblationFlags::default(), 1, &EncoderRegistry::new()).unwrap();
        let names: Vec<String> = m.params().tensors().into_iter().map(|t| t.name).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"mcaf.nas_alpha".to_string()));
        let mut p = m.params().clone();
        let mut_names: Vec<String> = p.tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(mut_names, names);
    }

    #[test]
    fn raw_rgb_branch_runs() {
        let cfg = ModelConfig::raw_rgb(PreprocessConfig { height: 16, width: 16 });
        let m = DetectorModel::init(cfg, AblationFlags::default(), 0, &EncoderRegistry::new()).unwrap();
        assert!(m.params().extractor.is_empty());
        let z = m.forward(&random_image(4, 16, 16), &CaptionRecord::none()).unwrap();
        assert!(z.is_finite());
    }

    #[test]
    fn single_class_training_set_is_config_error() {
        let samples: Vec<Sample> = (0..4)
            .map(|i| Sample {
                image: random_image(i, 16, 16),
                caption: CaptionRecord::none(),
                label: Label::Real,
            })
            .collect();
        assert!(matches!(
            train(&samples, &ModelConfig::tiny(), &TrainConfig::default()),
            Err(Error::Config(_))
        ));
        assert!(matches!(train(&[], &ModelConfig::tiny(), &TrainConfig::default()), Err(Error::Config(_))));
    }
}
