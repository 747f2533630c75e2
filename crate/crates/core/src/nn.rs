//! Minimal layers with explicit backward passes, in f64.
//!
//! Gradients are accumulated into a parameter-shaped value of the same type
//! (`grad.weight[k] += ...`), so a zeroed clone of a layer is its gradient
//! buffer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Fully connected layer, `y = W x + b` with `W` stored `out × in` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(in_dim, out_dim);
        fill_he_normal(&mut layer.weight, in_dim, rng);
        layer
    }

    /// Same as [`Linear::init`] with the variance scaled for a sigmoid/identity output.
    pub fn init_xavier<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(in_dim, out_dim);
        let std = (1.0 / in_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        layer.weight.iter_mut().for_each(|w| *w = normal.sample(rng));
        layer
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::Validation(format!(
                "linear layer expects {} inputs, got {}",
                self.in_dim,
                x.len()
            )));
        }
        Ok(self
            .weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect())
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.in_dim];
        for (o, &g) in grad_out.iter().enumerate() {
            grad.bias[o] += g;
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }
}

/// Square-kernel 2D convolution with zero padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out × in × k × k`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self::zeros(in_channels, out_channels, kernel, stride, padding);
        fill_he_normal(&mut layer.weight, in_channels * kernel * kernel, rng);
        layer
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let oh = (height + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (width + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn check_input(&self, x: &ImageTensor) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::Validation(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        if x.height() + 2 * self.padding < self.kernel || x.width() + 2 * self.padding < self.kernel {
            return Err(Error::Validation(format!(
                "input {}x{} too small for kernel {}",
                x.height(),
                x.width(),
                self.kernel
            )));
        }
        Ok(())
    }

    // Range of output positions whose tap `k` lands inside the input.
    fn valid_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let k = k as isize;
        let lo = if p > k { (p - k + s - 1) / s } else { 0 };
        let last = in_len as isize - 1 + p - k;
        if last < 0 {
            return (0, 0);
        }
        let hi = (last / s + 1).clamp(0, out_len as isize);
        (lo as usize, (hi as usize).max(lo as usize))
    }

    pub fn forward(&self, x: &ImageTensor) -> Result<ImageTensor> {
        self.check_input(x)?;
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let mut out = ImageTensor::zeros(self.out_channels, oh, ow);
        for o in 0..self.out_channels {
            let plane = out.channel_mut(o);
            plane.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_channels {
                let input = x.channel(i);
                for ky in 0..k {
                    let (y0, y1) = self.valid_range(ky, h, oh);
                    for kx in 0..k {
                        let wv = self.weight[((o * self.in_channels + i) * k + ky) * k + kx];
                        let (x0, x1) = self.valid_range(kx, w, ow);
                        for oy in y0..y1 {
                            let iy = oy * self.stride + ky - self.padding;
                            let in_row = &input[iy * w..(iy + 1) * w];
                            let out_row = &mut plane[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                out_row[ox] += wv * in_row[ox * self.stride + kx - self.padding];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &ImageTensor, grad_out: &ImageTensor, grad: &mut Conv2d) -> ImageTensor {
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = (grad_out.height(), grad_out.width());
        let k = self.kernel;
        let mut grad_in = ImageTensor::zeros(self.in_channels, h, w);
        for o in 0..self.out_channels {
            let g = grad_out.channel(o);
            grad.bias[o] += g.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let input = x.channel(i);
                for ky in 0..k {
                    let (y0, y1) = self.valid_range(ky, h, oh);
                    for kx in 0..k {
                        let widx = ((o * self.in_channels + i) * k + ky) * k + kx;
                        let wv = self.weight[widx];
                        let (x0, x1) = self.valid_range(kx, w, ow);
                        let mut gw = 0.0;
                        let gin = grad_in.channel_mut(i);
                        for oy in y0..y1 {
                            let iy = oy * self.stride + ky - self.padding;
                            let g_row = &g[oy * ow..(oy + 1) * ow];
                            let in_row = &input[iy * w..(iy + 1) * w];
                            let gin_row = &mut gin[iy * w..(iy + 1) * w];
                            for ox in x0..x1 {
                                let ix = ox * self.stride + kx - self.padding;
                                gw += g_row[ox] * in_row[ix];
                                gin_row[ix] += wv * g_row[ox];
                            }
                        }
                        grad.weight[widx] += gw;
                    }
                }
            }
        }
        grad_in
    }
}

fn fill_he_normal<R: Rng + ?Sized>(weights: &mut [f64], fan_in: usize, rng: &mut R) {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    weights.iter_mut().for_each(|w| *w = normal.sample(rng));
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn relu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| relu(v)).collect()
}

pub fn relu_tensor(x: &ImageTensor) -> ImageTensor {
    let mut out = x.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = relu(*v));
    out
}

/// Masks `grad` by the sign of the pre-activation (subgradient 0 at 0).
pub fn relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Bin boundaries of adaptive average pooling along one axis:
/// bin `i` covers `[floor(i*n/m), ceil((i+1)*n/m))`.
pub fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

/// Adaptive average pooling of every channel to `out_h × out_w`. Works for
/// both shrinking and growing planes (bins always hold at least one pixel).
pub fn adaptive_avg_pool(x: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    let rows = adaptive_bins(x.height(), out_h);
    let cols = adaptive_bins(x.width(), out_w);
    let w = x.width();
    let mut out = ImageTensor::zeros(x.channels(), out_h, out_w);
    for c in 0..x.channels() {
        let input = x.channel(c);
        for (bi, &(r0, r1)) in rows.iter().enumerate() {
            for (bj, &(c0, c1)) in cols.iter().enumerate() {
                let mut acc = 0.0;
                for r in r0..r1 {
                    acc += input[r * w + c0..r * w + c1].iter().sum::<f64>();
                }
                out.set(c, bi, bj, acc / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward(grad_out: &ImageTensor, in_h: usize, in_w: usize) -> ImageTensor {
    let rows = adaptive_bins(in_h, grad_out.height());
    let cols = adaptive_bins(in_w, grad_out.width());
    let mut grad_in = ImageTensor::zeros(grad_out.channels(), in_h, in_w);
    for c in 0..grad_out.channels() {
        for (bi, &(r0, r1)) in rows.iter().enumerate() {
            for (bj, &(c0, c1)) in cols.iter().enumerate() {
                let g = grad_out.get(c, bi, bj) / ((r1 - r0) * (c1 - c0)) as f64;
                let plane = grad_in.channel_mut(c);
                for r in r0..r1 {
                    plane[r * in_w + c0..r * in_w + c1].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    grad_in
}

/// Per-channel spatial mean.
pub fn global_avg_pool(x: &ImageTensor) -> Vec<f64> {
    let n = x.plane_len() as f64;
    (0..x.channels())
        .map(|c| x.channel(c).iter().sum::<f64>() / n)
        .collect()
}
