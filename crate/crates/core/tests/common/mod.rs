//! Brute-force reference implementations shared by integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trinity_core::data::Label;
use trinity_core::encoders::CaptionRecord;
use trinity_core::fusion::{bce_grad, bce_with_logits, DetectorModel, Embeddings};
use trinity_core::mcaf::{Mcaf, McafState};
use trinity_core::{ImageTensor, Plane};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Plane {
    Plane::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(c, h, w, |_, _, _| rng.random_range(0.0..1.0))
}

fn ortho_scale(k: usize, n: usize) -> f64 {
    if k == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

/// Orthonormal basis value computed straight from the cosine formula.
pub fn basis_value(u: usize, v: usize, i: usize, j: usize, h: usize, w: usize) -> f64 {
    ortho_scale(u, h)
        * ortho_scale(v, w)
        * (PI * u as f64 * (i as f64 + 0.5) / h as f64).cos()
        * (PI * v as f64 * (j as f64 + 0.5) / w as f64).cos()
}

/// Direct double sum `F(u,v) = sum_ij x(i,j) B^{u,v}(i,j)`.
pub fn naive_dct2(x: &Plane) -> Plane {
    let (h, w) = (x.height(), x.width());
    Plane::from_fn(h, w, |u, v| {
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                acc += x.get(i, j) * basis_value(u, v, i, j, h, w);
            }
        }
        acc
    })
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Parameter group of a tensor name.
pub fn group_of(name: &str) -> &'static str {
    if name.starts_with("extractor") {
        "extractor"
    } else if name == "mcaf.nas_alpha" {
        "mcaf.nas_alpha"
    } else if name.starts_with("mcaf") {
        "mcaf.fc"
    } else if name.starts_with("proj") {
        "proj"
    } else {
        "head"
    }
}

/// Analytic vs central-difference gradient of the BCE loss, per parameter
/// group. At most `per_tensor` evenly spaced coordinates of each tensor are
/// probed.
pub fn end_to_end_gradient_errors(
    model: &DetectorModel,
    img: &ImageTensor,
    caption: &CaptionRecord,
    label: Label,
    per_tensor: usize,
) -> BTreeMap<&'static str, f64> {
    let emb: Embeddings = model.embed(img, caption).unwrap();
    let y = label.target();
    let trace = model.forward_embedded(img, &emb).unwrap();
    let grad = model.backward(&trace, bce_grad(trace.logit, y));
    let analytic: Vec<(String, Vec<f64>)> = grad
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.data.to_vec()))
        .collect();

    let loss = |m: &DetectorModel| bce_with_logits(m.forward_embedded(img, &emb).unwrap().logit, y);
    let h = 1e-6;
    let mut per_group: BTreeMap<&'static str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut probe = model.clone();
    for (t_idx, (name, a)) in analytic.iter().enumerate() {
        let n = a.len();
        let step = n.div_ceil(per_tensor).max(1);
        for k in (0..n).step_by(step) {
            let original = probe.params_mut().tensors_mut()[t_idx].1[k];
            probe.params_mut().tensors_mut()[t_idx].1[k] = original + h;
            let up = loss(&probe);
            probe.params_mut().tensors_mut()[t_idx].1[k] = original - h;
            let down = loss(&probe);
            probe.params_mut().tensors_mut()[t_idx].1[k] = original;
            let entry = per_group.entry(group_of(name)).or_default();
            entry.0.push(a[k]);
            entry.1.push((up - down) / (2.0 * h));
        }
    }
    per_group
        .into_iter()
        .map(|(g, (a, n))| (g, rel_err(&a, &n)))
        .collect()
}

/// Finite-difference check of `L = sum_c w_c a_c(x)` for one MCAF unit.
/// Returns relative errors for the input, the fc weights and the NAS logits.
pub fn mcaf_gradient_errors(
    unit: &Mcaf,
    state: &McafState,
    x: &ImageTensor,
    weights: &[f64],
) -> BTreeMap<&'static str, f64> {
    let objective = |s: &McafState, x: &ImageTensor| -> f64 {
        let (a, _) = unit.forward(x, s).unwrap();
        a.weights().iter().zip(weights).map(|(a, w)| a * w).sum()
    };
    let (_, trace) = unit.forward(x, state).unwrap();
    let mut grad = McafState {
        fc1: zeroed(&state.fc1),
        fc2: state.fc2.as_ref().map(zeroed),
        nas_alphas: vec![0.0; state.nas_alphas.len()],
    };
    let d_x = unit.backward(state, &trace, weights, &mut grad);
    let h = 1e-6;
    let mut out = BTreeMap::new();

    let mut numeric = Vec::new();
    let mut xp = x.clone();
    for k in 0..x.as_slice().len() {
        let o = xp.as_slice()[k];
        xp.as_mut_slice()[k] = o + h;
        let up = objective(state, &xp);
        xp.as_mut_slice()[k] = o - h;
        let down = objective(state, &xp);
        xp.as_mut_slice()[k] = o;
        numeric.push((up - down) / (2.0 * h));
    }
    out.insert("input", rel_err(d_x.as_slice(), &numeric));

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut s = state.clone();
    let layers = if state.fc2.is_some() { 2 } else { 1 };
    for layer in 0..layers {
        let g = if layer == 0 { &grad.fc1 } else { grad.fc2.as_ref().unwrap() };
        analytic.extend(g.weight.iter().chain(&g.bias));
        let n_w = g.weight.len();
        for k in 0..n_w + g.bias.len() {
            let o = *fc_slot(&mut s, layer, k);
            *fc_slot(&mut s, layer, k) = o + h;
            let up = objective(&s, x);
            *fc_slot(&mut s, layer, k) = o - h;
            let down = objective(&s, x);
            *fc_slot(&mut s, layer, k) = o;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    out.insert("fc", rel_err(&analytic, &numeric));

    if !state.nas_alphas.is_empty() {
        let mut numeric = Vec::new();
        let mut s = state.clone();
        for k in 0..s.nas_alphas.len() {
            let o = s.nas_alphas[k];
            s.nas_alphas[k] = o + h;
            let up = objective(&s, x);
            s.nas_alphas[k] = o - h;
            let down = objective(&s, x);
            s.nas_alphas[k] = o;
            numeric.push((up - down) / (2.0 * h));
        }
        out.insert("nas_alpha", rel_err(&grad.nas_alphas, &numeric));
    }
    out
}

// Weights first, then biases, of fc1 (layer 0) or fc2 (layer 1).
fn fc_slot(s: &mut McafState, layer: usize, k: usize) -> &mut f64 {
    let l = if layer == 0 { &mut s.fc1 } else { s.fc2.as_mut().unwrap() };
    let n_w = l.weight.len();
    if k < n_w {
        &mut l.weight[k]
    } else {
        &mut l.bias[k - n_w]
    }
}

fn zeroed(l: &trinity_core::nn::Linear) -> trinity_core::nn::Linear {
    trinity_core::nn::Linear::zeros(l.in_dim, l.out_dim)
}
