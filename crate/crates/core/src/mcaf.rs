//! Multi-spectral channel attention.
//!
//! The input feature map is average-pooled to a small DCT plane (7×7 by
//! default) and its channels are split into `n_parts` equal groups. Each group
//! is projected onto one DCT basis plane chosen by a selection criterion, or,
//! under [`Criterion::Nas`], onto a softmax-weighted mixture of candidate
//! planes whose logits are learned. The resulting C-vector goes through a
//! small fully connected map and a sigmoid to give one gate per channel.
//!
//! Criteria:
//! * `LF`: the first `n_parts` indices in zigzag order (`u+v` ascending, ties
//!   by `u`).
//! * `TS`: a fixed ranking of the 7×7 grid produced offline by two-step
//!   selection (score every single component on its own, keep the best
//!   ones). The shipped table is the published FcaNet `top32` ranking, DC
//!   first. [`two_step_selection`] implements the procedure for small-scale
//!   re-derivation.
//! * `NAS`: every part mixes the candidate set `O` with weights
//!   `softmax(alpha)`; `alpha` is shared by all parts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Linear};
use crate::spectral::{dct_basis, BasisIndex, DctConvention};
use crate::tensor::{ImageTensor, Plane};

/// Basis scaling used for every MCAF projection.
pub const MCAF_CONVENTION: DctConvention = DctConvention::Orthonormal;

/// Two-step selection ranking on the 7×7 grid as `(u, v)`, best first.
pub const TS_TABLE_7X7: [(usize, usize); 32] = [
    (0, 0), (0, 1), (6, 0), (0, 5), (0, 2), (1, 0), (1, 2), (4, 0),
    (5, 0), (1, 6), (3, 0), (0, 4), (0, 6), (0, 3), (3, 5), (2, 2),
    (4, 6), (6, 3), (3, 3), (5, 3), (5, 5), (2, 1), (6, 1), (5, 2),
    (5, 4), (3, 2), (3, 1), (4, 1), (2, 3), (2, 0), (6, 5), (1, 3),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Criterion {
    #[serde(rename = "LF")]
    Lf,
    #[serde(rename = "TS")]
    Ts,
    #[serde(rename = "NAS")]
    Nas,
}

/// Shape of the compression map between the frequency vector and the gates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FcLayout {
    /// `C -> C/r -> C` with ReLU in between.
    #[default]
    Bottleneck,
    /// A single `C -> C` layer.
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McafConfig {
    pub channels: usize,
    pub n_parts: usize,
    /// Spatial size `(H_f, W_f)` the input is pooled to before projection.
    pub dct_plane: (usize, usize),
    pub reduction: usize,
    pub criterion: Criterion,
    /// Candidate set for NAS; `None` means the full DCT plane grid.
    #[serde(default)]
    pub nas_candidates: Option<Vec<BasisIndex>>,
    #[serde(default)]
    pub fc_layout: FcLayout,
}

impl McafConfig {
    /// Defaults for a `channels`-wide map: 16 parts (or one per channel when
    /// narrower), 7×7 plane, reduction 4, two-step table.
    pub fn for_channels(channels: usize) -> Self {
        Self {
            channels,
            n_parts: if channels >= 16 { 16 } else { channels },
            dct_plane: (7, 7),
            reduction: 4,
            criterion: Criterion::Ts,
            nas_candidates: None,
            fc_layout: FcLayout::Bottleneck,
        }
    }

    pub fn with_criterion(mut self, criterion: Criterion) -> Self {
        self.criterion = criterion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.n_parts == 0 || self.reduction == 0 {
            return Err(Error::Config(
                "channels, n_parts and reduction must be positive".into(),
            ));
        }
        if self.channels % self.n_parts != 0 {
            return Err(Error::Config(format!(
                "{} channels cannot be split into {} equal parts",
                self.channels, self.n_parts
            )));
        }
        let (h, w) = self.dct_plane;
        if h == 0 || w == 0 {
            return Err(Error::Config("dct_plane dimensions must be positive".into()));
        }
        if let Some(cands) = &self.nas_candidates {
            if self.criterion == Criterion::Nas && cands.is_empty() {
                return Err(Error::Config("NAS candidate set is empty".into()));
            }
            for c in cands {
                c.check(h, w)
                    .map_err(|e| Error::Config(format!("NAS candidate: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn part_size(&self) -> usize {
        self.channels / self.n_parts
    }

    pub fn bottleneck_dim(&self) -> usize {
        (self.channels / self.reduction).max(1)
    }

    pub fn candidates(&self) -> Vec<BasisIndex> {
        match &self.nas_candidates {
            Some(c) => c.clone(),
            None => {
                let (h, w) = self.dct_plane;
                (0..h).flat_map(|u| (0..w).map(move |v| BasisIndex::new(u, v))).collect()
            }
        }
    }
}

/// Which DCT components feed each channel part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyIndexSet {
    pub criterion: Criterion,
    pub n_parts: usize,
    /// LF/TS: one index per part, in part order. NAS: the candidate set `O`,
    /// shared by all parts.
    pub indices: Vec<BasisIndex>,
}

impl FrequencyIndexSet {
    /// Fixed assignment of part `i` (LF/TS only).
    pub fn assignment(&self, part: usize) -> Option<BasisIndex> {
        match self.criterion {
            Criterion::Nas => None,
            _ => self.indices.get(part).copied(),
        }
    }

    pub fn candidates(&self) -> Option<&[BasisIndex]> {
        match self.criterion {
            Criterion::Nas => Some(&self.indices),
            _ => None,
        }
    }

    fn validate(&self, cfg: &McafConfig) -> Result<()> {
        if self.n_parts != cfg.n_parts {
            return Err(Error::Validation(format!(
                "index set has {} parts, config has {}",
                self.n_parts, cfg.n_parts
            )));
        }
        if self.criterion != Criterion::Nas && self.indices.len() != self.n_parts {
            return Err(Error::Validation(format!(
                "{} assignments for {} parts",
                self.indices.len(),
                self.n_parts
            )));
        }
        if self.indices.is_empty() {
            return Err(Error::Validation("empty frequency index set".into()));
        }
        let (h, w) = cfg.dct_plane;
        self.indices.iter().try_for_each(|i| i.check(h, w))
    }
}

/// All `H_f × W_f` indices ordered by `u+v`, ties by `u`.
pub fn zigzag_order(height: usize, width: usize) -> Vec<BasisIndex> {
    let mut all: Vec<BasisIndex> = (0..height)
        .flat_map(|u| (0..width).map(move |v| BasisIndex::new(u, v)))
        .collect();
    all.sort_by_key(|i| (i.u + i.v, i.u));
    all
}

/// The two-step table mapped onto an `H_f × W_f` plane. Planes at least 7
/// wide scale each entry by `H_f/7` (resp. `W_f/7`); smaller planes keep the
/// entries that fit, in table order.
pub fn ts_table(height: usize, width: usize) -> Vec<BasisIndex> {
    let (sh, sw) = ((height / 7).max(1), (width / 7).max(1));
    TS_TABLE_7X7
        .iter()
        .map(|&(u, v)| {
            if height >= 7 && width >= 7 {
                BasisIndex::new(u * sh, v * sw)
            } else {
                BasisIndex::new(u, v)
            }
        })
        .filter(|i| i.u < height && i.v < width)
        .collect()
}

pub fn select_frequencies(cfg: &McafConfig) -> Result<FrequencyIndexSet> {
    cfg.validate()?;
    let (h, w) = cfg.dct_plane;
    let indices = match cfg.criterion {
        Criterion::Lf => take_parts(zigzag_order(h, w), cfg.n_parts, "zigzag grid")?,
        Criterion::Ts => take_parts(ts_table(h, w), cfg.n_parts, "two-step table")?,
        Criterion::Nas => {
            let cands = cfg.candidates();
            if cands.is_empty() {
                return Err(Error::Config("NAS candidate set is empty".into()));
            }
            cands
        }
    };
    Ok(FrequencyIndexSet {
        criterion: cfg.criterion,
        n_parts: cfg.n_parts,
        indices,
    })
}

fn take_parts(available: Vec<BasisIndex>, n: usize, what: &str) -> Result<Vec<BasisIndex>> {
    if n > available.len() {
        return Err(Error::Config(format!(
            "{n} parts requested but the {what} only has {} indices",
            available.len()
        )));
    }
    Ok(available.into_iter().take(n).collect())
}

/// Two-step selection: score each candidate on its own, then keep the `n`
/// best (stable on ties, so earlier candidates win).
pub fn two_step_selection<F>(candidates: &[BasisIndex], n: usize, mut score: F) -> Result<Vec<BasisIndex>>
where
    F: FnMut(BasisIndex) -> Result<f64>,
{
    if n > candidates.len() {
        return Err(Error::Config(format!(
            "cannot keep {n} of {} candidates",
            candidates.len()
        )));
    }
    let mut scored = candidates
        .iter()
        .map(|&c| score(c).map(|s| (c, s)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored.into_iter().take(n).map(|(c, _)| c).collect())
}

/// Learnable parameters of the unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McafState {
    pub fc1: Linear,
    /// Absent for [`FcLayout::Single`].
    pub fc2: Option<Linear>,
    /// One logit per NAS candidate; empty for LF/TS.
    pub nas_alphas: Vec<f64>,
}

impl McafState {
    pub fn zeros(cfg: &McafConfig) -> Self {
        let c = cfg.channels;
        let n_alphas = if cfg.criterion == Criterion::Nas {
            cfg.candidates().len()
        } else {
            0
        };
        match cfg.fc_layout {
            FcLayout::Bottleneck => Self {
                fc1: Linear::zeros(c, cfg.bottleneck_dim()),
                fc2: Some(Linear::zeros(cfg.bottleneck_dim(), c)),
                nas_alphas: vec![0.0; n_alphas],
            },
            FcLayout::Single => Self {
                fc1: Linear::zeros(c, c),
                fc2: None,
                nas_alphas: vec![0.0; n_alphas],
            },
        }
    }

    /// Random fc weights, NAS logits at zero (uniform mixture).
    pub fn init<R: Rng + ?Sized>(cfg: &McafConfig, rng: &mut R) -> Self {
        let mut state = Self::zeros(cfg);
        let c = cfg.channels;
        match cfg.fc_layout {
            FcLayout::Bottleneck => {
                let hidden = cfg.bottleneck_dim();
                state.fc1 = Linear::init(c, hidden, rng);
                state.fc2 = Some(Linear::init_xavier(hidden, c, rng));
            }
            FcLayout::Single => state.fc1 = Linear::init_xavier(c, c, rng),
        }
        state
    }

    pub fn validate(&self, cfg: &McafConfig) -> Result<()> {
        let c = cfg.channels;
        let ok = match (&cfg.fc_layout, &self.fc2) {
            (FcLayout::Bottleneck, Some(fc2)) => {
                let h = cfg.bottleneck_dim();
                self.fc1.in_dim == c && self.fc1.out_dim == h && fc2.in_dim == h && fc2.out_dim == c
            }
            (FcLayout::Single, None) => self.fc1.in_dim == c && self.fc1.out_dim == c,
            _ => false,
        };
        if !ok {
            return Err(Error::Validation("MCAF fc shapes do not match the config".into()));
        }
        let expected = if cfg.criterion == Criterion::Nas {
            cfg.candidates().len()
        } else {
            0
        };
        if self.nas_alphas.len() != expected {
            return Err(Error::Validation(format!(
                "expected {expected} NAS logits, found {}",
                self.nas_alphas.len()
            )));
        }
        if self.nas_alphas.iter().any(|a| !a.is_finite()) {
            return Err(Error::Validation("non-finite NAS logit".into()));
        }
        Ok(())
    }
}

/// Per-channel gates, each strictly inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionVector(Vec<f64>);

impl AttentionVector {
    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Wraps raw weights, checking the open-interval invariant.
    pub fn try_from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().all(|&w| w > 0.0 && w < 1.0) {
            Ok(Self(weights))
        } else {
            Err(Error::Validation("attention weights must lie in (0, 1)".into()))
        }
    }
}

const GATE_FLOOR: f64 = f64::MIN_POSITIVE;
const GATE_CEIL: f64 = 1.0 - f64::EPSILON;

// Keeps saturated gates off the closed endpoints.
#[inline]
fn gate(z: f64) -> f64 {
    nn::sigmoid(z).clamp(GATE_FLOOR, GATE_CEIL)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|a| (a - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Intermediate values kept by [`Mcaf::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct McafTrace {
    input_hw: (usize, usize),
    /// NAS only: `projections[o][c]` = channel `c` projected on candidate `o`.
    projections: Vec<Vec<f64>>,
    mixture: Vec<f64>,
    freq: Vec<f64>,
    fc1_pre: Vec<f64>,
    hidden: Vec<f64>,
    attention: Vec<f64>,
}

impl McafTrace {
    pub fn freq(&self) -> &[f64] {
        &self.freq
    }
}

/// A configured unit with its basis planes precomputed.
#[derive(Clone, Debug)]
pub struct Mcaf {
    config: McafConfig,
    indices: FrequencyIndexSet,
    basis: Vec<Plane>,
}

impl Mcaf {
    pub fn new(config: McafConfig) -> Result<Self> {
        let indices = select_frequencies(&config)?;
        Self::with_indices(config, indices)
    }

    pub fn with_indices(config: McafConfig, indices: FrequencyIndexSet) -> Result<Self> {
        config.validate()?;
        indices.validate(&config)?;
        let (h, w) = config.dct_plane;
        let basis = indices
            .indices
            .iter()
            .map(|&i| dct_basis(h, w, i, MCAF_CONVENTION))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            indices,
            basis,
        })
    }

    pub fn config(&self) -> &McafConfig {
        &self.config
    }

    pub fn indices(&self) -> &FrequencyIndexSet {
        &self.indices
    }

    fn check_input(&self, x: &ImageTensor) -> Result<()> {
        if x.channels() != self.config.channels {
            return Err(Error::Validation(format!(
                "MCAF configured for {} channels, input has {}",
                self.config.channels,
                x.channels()
            )));
        }
        Ok(())
    }

    fn pool(&self, x: &ImageTensor) -> ImageTensor {
        let (h, w) = self.config.dct_plane;
        if (x.height(), x.width()) == (h, w) {
            x.clone()
        } else {
            nn::adaptive_avg_pool(x, h, w)
        }
    }

    fn project(&self, pooled: &ImageTensor, state: &McafState) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
        let c = self.config.channels;
        let part = self.config.part_size();
        let dot = |ch: usize, b: &Plane| -> f64 {
            pooled.channel(ch).iter().zip(b.as_slice()).map(|(p, q)| p * q).sum()
        };
        match self.indices.criterion {
            Criterion::Nas => {
                let mixture = softmax(&state.nas_alphas);
                let projections: Vec<Vec<f64>> = self
                    .basis
                    .iter()
                    .map(|b| (0..c).map(|ch| dot(ch, b)).collect())
                    .collect();
                let freq = (0..c)
                    .map(|ch| mixture.iter().zip(&projections).map(|(p, proj)| p * proj[ch]).sum())
                    .collect();
                (freq, projections, mixture)
            }
            _ => {
                let freq = (0..c).map(|ch| dot(ch, &self.basis[ch / part])).collect();
                (freq, Vec::new(), Vec::new())
            }
        }
    }

    /// Pooled input projected onto each part's component(s), length C.
    pub fn freq_vector(&self, x: &ImageTensor, state: &McafState) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_state(state)?;
        Ok(self.project(&self.pool(x), state).0)
    }

    fn check_state(&self, state: &McafState) -> Result<()> {
        state.validate(&self.config)
    }

    fn compress(&self, freq: &[f64], state: &McafState) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let fc1_pre = state.fc1.forward(freq)?;
        match &state.fc2 {
            Some(fc2) => {
                let hidden = nn::relu_vec(&fc1_pre);
                let logits = fc2.forward(&hidden)?;
                Ok((fc1_pre, hidden, logits))
            }
            None => Ok((fc1_pre.clone(), Vec::new(), fc1_pre)),
        }
    }

    pub fn attention(&self, freq: &[f64], state: &McafState) -> Result<AttentionVector> {
        if freq.len() != self.config.channels {
            return Err(Error::Validation(format!(
                "frequency vector has length {}, expected {}",
                freq.len(),
                self.config.channels
            )));
        }
        let (_, _, logits) = self.compress(freq, state)?;
        Ok(AttentionVector(logits.into_iter().map(gate).collect()))
    }

    pub fn forward(&self, x: &ImageTensor, state: &McafState) -> Result<(AttentionVector, McafTrace)> {
        self.check_input(x)?;
        self.check_state(state)?;
        let pooled = self.pool(x);
        let (freq, projections, mixture) = self.project(&pooled, state);
        let (fc1_pre, hidden, logits) = self.compress(&freq, state)?;
        let attention: Vec<f64> = logits.into_iter().map(gate).collect();
        let trace = McafTrace {
            input_hw: (x.height(), x.width()),
            projections,
            mixture,
            freq,
            fc1_pre,
            hidden,
            attention: attention.clone(),
        };
        Ok((AttentionVector(attention), trace))
    }

    /// Backpropagates `dL/d(attention)`; accumulates parameter gradients into
    /// `grad` and returns `dL/dx`.
    pub fn backward(
        &self,
        state: &McafState,
        trace: &McafTrace,
        grad_attention: &[f64],
        grad: &mut McafState,
    ) -> ImageTensor {
        let d_logits: Vec<f64> = grad_attention
            .iter()
            .zip(&trace.attention)
            .map(|(g, a)| g * a * (1.0 - a))
            .collect();
        let d_freq = match (&state.fc2, grad.fc2.as_mut()) {
            (Some(fc2), Some(g_fc2)) => {
                let mut d_hidden = fc2.backward(&trace.hidden, &d_logits, g_fc2);
                nn::relu_backward(&trace.fc1_pre, &mut d_hidden);
                state.fc1.backward(&trace.freq, &d_hidden, &mut grad.fc1)
            }
            _ => state.fc1.backward(&trace.freq, &d_logits, &mut grad.fc1),
        };

        let c = self.config.channels;
        let (ph, pw) = self.config.dct_plane;
        let mut d_pooled = ImageTensor::zeros(c, ph, pw);
        match self.indices.criterion {
            Criterion::Nas => {
                let mut mixed = vec![0.0; ph * pw];
                for (p, b) in trace.mixture.iter().zip(&self.basis) {
                    for (m, v) in mixed.iter_mut().zip(b.as_slice()) {
                        *m += p * v;
                    }
                }
                for ch in 0..c {
                    let g = d_freq[ch];
                    for (d, m) in d_pooled.channel_mut(ch).iter_mut().zip(&mixed) {
                        *d = g * m;
                    }
                }
                let d_mix: Vec<f64> = trace
                    .projections
                    .iter()
                    .map(|proj| proj.iter().zip(&d_freq).map(|(a, b)| a * b).sum())
                    .collect();
                let expected: f64 = trace.mixture.iter().zip(&d_mix).map(|(p, d)| p * d).sum();
                for (k, g) in grad.nas_alphas.iter_mut().enumerate() {
                    *g += trace.mixture[k] * (d_mix[k] - expected);
                }
            }
            _ => {
                let part = self.config.part_size();
                for ch in 0..c {
                    let g = d_freq[ch];
                    let b = self.basis[ch / part].as_slice();
                    for (d, v) in d_pooled.channel_mut(ch).iter_mut().zip(b) {
                        *d = g * v;
                    }
                }
            }
        }
        let (h, w) = trace.input_hw;
        if (h, w) == (ph, pw) {
            d_pooled
        } else {
            nn::adaptive_avg_pool_backward(&d_pooled, h, w)
        }
    }
}

/// Frequency vector for `x` under an explicit index set.
pub fn mcaf_freq_vector(
    x: &ImageTensor,
    indices: &FrequencyIndexSet,
    state: &McafState,
    cfg: &McafConfig,
) -> Result<Vec<f64>> {
    Mcaf::with_indices(cfg.clone(), indices.clone())?.freq_vector(x, state)
}

/// Gates from a frequency vector. The layout is read off the state.
pub fn mcaf_attention(freq: &[f64], state: &McafState) -> Result<AttentionVector> {
    if freq.len() != state.fc1.in_dim {
        return Err(Error::Validation(format!(
            "frequency vector has length {}, fc expects {}",
            freq.len(),
            state.fc1.in_dim
        )));
    }
    let pre = state.fc1.forward(freq)?;
    let logits = match &state.fc2 {
        Some(fc2) => fc2.forward(&nn::relu_vec(&pre))?,
        None => pre,
    };
    if logits.len() != freq.len() {
        return Err(Error::Validation("fc output width differs from channel count".into()));
    }
    Ok(AttentionVector(logits.into_iter().map(gate).collect()))
}

/// Scales channel `c` of `x` by `attention[c]`.
pub fn mcaf_apply(x: &ImageTensor, attention: &AttentionVector) -> Result<ImageTensor> {
    if x.channels() != attention.len() {
        return Err(Error::Validation(format!(
            "{} gates for {} channels",
            attention.len(),
            x.channels()
        )));
    }
    let mut out = x.clone();
    for (c, &a) in attention.weights().iter().enumerate() {
        out.channel_mut(c).iter_mut().for_each(|v| *v *= a);
    }
    Ok(out)
}
