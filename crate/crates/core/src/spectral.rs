//! Exact 2D DCT-II on image planes.
//!
//! Two scalings are available. [`DctConvention::Orthonormal`] multiplies each
//! axis by `c(0) = sqrt(1/N)`, `c(k>0) = sqrt(2/N)`, which makes the basis
//! orthonormal and the transform pair exactly invertible. It is the canonical
//! convention everywhere else in the crate. [`DctConvention::PaperLiteral`]
//! uses the bare cosine products `cos(pi*u*(i+1/2)/H) * cos(pi*v*(j+1/2)/W)`
//! and its inverse `x = (1/H) * sum f * B`, which is kept for traceability and
//! does not invert the forward transform.
//!
//! The forward transform is evaluated separably as `A_H * X * A_W^T`, where
//! `A_N[k][i]` is the scaled cosine table for one axis.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Plane};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DctConvention {
    #[default]
    Orthonormal,
    PaperLiteral,
}

/// A 2D frequency index: `u` along height, `v` along width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BasisIndex {
    pub u: usize,
    pub v: usize,
}

impl BasisIndex {
    pub const DC: BasisIndex = BasisIndex { u: 0, v: 0 };

    pub const fn new(u: usize, v: usize) -> Self {
        Self { u, v }
    }

    pub fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.u < height && self.v < width {
            Ok(())
        } else {
            Err(Error::Index {
                u: self.u,
                v: self.v,
                height,
                width,
            })
        }
    }
}

impl std::fmt::Display for BasisIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.u, self.v)
    }
}

#[inline]
fn axis_scale(k: usize, n: usize, convention: DctConvention) -> f64 {
    match convention {
        DctConvention::PaperLiteral => 1.0,
        DctConvention::Orthonormal if k == 0 => (1.0 / n as f64).sqrt(),
        DctConvention::Orthonormal => (2.0 / n as f64).sqrt(),
    }
}

/// The n×n cosine table for one axis: row `k`, column `i` holds
/// `c(k) * cos(pi * k * (i + 1/2) / n)`.
pub fn cosine_table(n: usize, convention: DctConvention) -> Vec<f64> {
    let mut table = Vec::with_capacity(n * n);
    for k in 0..n {
        let scale = axis_scale(k, n, convention);
        for i in 0..n {
            table.push(scale * (PI * k as f64 * (i as f64 + 0.5) / n as f64).cos());
        }
    }
    table
}

/// Basis plane `B^{u,v}` of size `height × width`.
pub fn dct_basis(
    height: usize,
    width: usize,
    index: BasisIndex,
    convention: DctConvention,
) -> Result<Plane> {
    if height == 0 || width == 0 {
        return Err(Error::Validation(format!(
            "basis plane dimensions must be positive, got {height}x{width}"
        )));
    }
    index.check(height, width)?;
    let su = axis_scale(index.u, height, convention);
    let sv = axis_scale(index.v, width, convention);
    let row: Vec<f64> = (0..height)
        .map(|i| su * (PI * index.u as f64 * (i as f64 + 0.5) / height as f64).cos())
        .collect();
    let col: Vec<f64> = (0..width)
        .map(|j| sv * (PI * index.v as f64 * (j as f64 + 0.5) / width as f64).cos())
        .collect();
    Ok(Plane::from_fn(height, width, |i, j| row[i] * col[j]))
}

/// A DCT spectrum tagged with the convention that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct DctSpectrum {
    pub coefficients: Plane,
    pub convention: DctConvention,
}

impl DctSpectrum {
    pub fn new(coefficients: Plane, convention: DctConvention) -> Self {
        Self {
            coefficients,
            convention,
        }
    }

    pub fn get(&self, index: BasisIndex) -> f64 {
        self.coefficients.get(index.u, index.v)
    }

    pub fn energy(&self) -> f64 {
        self.coefficients.as_slice().iter().map(|c| c * c).sum()
    }
}

// out = left (m×k) * mid (k×n) * right^T, right is (p×n); result m×p.
fn sandwich(left: &[f64], m: usize, mid: &[f64], k: usize, n: usize, right: &[f64], p: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; m * n];
    for r in 0..m {
        let out_row = &mut tmp[r * n..(r + 1) * n];
        for t in 0..k {
            let a = left[r * k + t];
            if a == 0.0 {
                continue;
            }
            let mid_row = &mid[t * n..(t + 1) * n];
            for (o, x) in out_row.iter_mut().zip(mid_row) {
                *o += a * x;
            }
        }
    }
    let mut out = vec![0.0; m * p];
    for r in 0..m {
        let tmp_row = &tmp[r * n..(r + 1) * n];
        for q in 0..p {
            let right_row = &right[q * n..(q + 1) * n];
            out[r * p + q] = tmp_row.iter().zip(right_row).map(|(a, b)| a * b).sum();
        }
    }
    out
}

fn transpose(table: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            out[c * n + r] = table[r * n + c];
        }
    }
    out
}

/// Forward 2D DCT of a plane.
pub fn dct2(x: &Plane, convention: DctConvention) -> Result<DctSpectrum> {
    if !x.is_finite() {
        return Err(Error::Validation("dct2 input contains non-finite values".into()));
    }
    let (h, w) = (x.height(), x.width());
    let a_h = cosine_table(h, convention);
    let a_w = cosine_table(w, convention);
    let coeffs = sandwich(&a_h, h, x.as_slice(), h, w, &a_w, w);
    Ok(DctSpectrum::new(Plane::new(h, w, coeffs)?, convention))
}

/// Inverse 2D DCT. The requested convention must match the spectrum's tag.
///
/// Under [`DctConvention::PaperLiteral`] this evaluates `(1/H) * sum f * B`
/// literally; that expression is not the inverse of the literal forward
/// transform.
pub fn idct2(spectrum: &DctSpectrum, convention: DctConvention) -> Result<Plane> {
    if spectrum.convention != convention {
        return Err(Error::Contract(format!(
            "spectrum was produced under {:?} but {:?} inverse was requested",
            spectrum.convention, convention
        )));
    }
    let f = &spectrum.coefficients;
    if !f.is_finite() {
        return Err(Error::Validation("idct2 input contains non-finite values".into()));
    }
    let (h, w) = (f.height(), f.width());
    let a_h_t = transpose(&cosine_table(h, convention), h);
    let a_w_t = transpose(&cosine_table(w, convention), w);
    // x = A_H^T F A_W = A_H^T F (A_W^T)^T
    let mut data = sandwich(&a_h_t, h, f.as_slice(), h, w, &a_w_t, w);
    if convention == DctConvention::PaperLiteral {
        let scale = 1.0 / h as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }
    Plane::new(h, w, data)
}

/// Per-channel forward DCT.
pub fn dct2_channels(x: &ImageTensor, convention: DctConvention) -> Result<Vec<DctSpectrum>> {
    (0..x.channels())
        .map(|c| dct2(&x.plane(c), convention))
        .collect()
}

/// Projection of every channel of `x` onto the single basis plane `B^{u,v}`.
pub fn freq_component(x: &ImageTensor, index: BasisIndex, convention: DctConvention) -> Result<Vec<f64>> {
    let basis = dct_basis(x.height(), x.width(), index, convention)?;
    Ok(project_channels(x, &basis))
}

pub(crate) fn project_channels(x: &ImageTensor, basis: &Plane) -> Vec<f64> {
    let b = basis.as_slice();
    (0..x.channels())
        .map(|c| x.channel(c).iter().zip(b).map(|(p, q)| p * q).sum())
        .collect()
}
