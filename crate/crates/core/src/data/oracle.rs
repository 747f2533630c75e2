//! Hand-built spectral baseline: a one-feature threshold classifier on the
//! share of AC energy in the upper half-band of the luma DCT spectrum.

use super::manifest::Label;
use crate::error::{Error, Result};
use crate::spectral::{dct2, DctConvention};
use crate::tensor::{ImageTensor, Plane};

/// AC energy with `u >= H/2` or `v >= W/2`, divided by total AC energy.
/// Luma is the channel mean. Returns 0 for a flat image.
pub fn high_band_energy_ratio(img: &ImageTensor) -> Result<f64> {
    let (c, h, w) = img.shape();
    let luma = Plane::from_fn(h, w, |i, j| (0..c).map(|ch| img.get(ch, i, j)).sum::<f64>() / c as f64);
    let spectrum = dct2(&luma, DctConvention::Orthonormal)?;
    let dc = spectrum.coefficients.get(0, 0).powi(2);
    let (mut high, mut total) = (0.0, 0.0);
    for u in 0..h {
        for v in 0..w {
            if u == 0 && v == 0 {
                continue;
            }
            let e = spectrum.coefficients.get(u, v).powi(2);
            total += e;
            if u >= h / 2 || v >= w / 2 {
                high += e;
            }
        }
    }
    // AC energy at rounding-noise level counts as flat
    Ok(if total > 1e-24 * (dc + total) { high / total } else { 0.0 })
}

/// `fake` iff the statistic is below (or, flipped, above) the threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdOracle {
    pub threshold: f64,
    pub fake_below: bool,
}

impl ThresholdOracle {
    /// Exhaustive search over midpoints between sorted values, both
    /// orientations; the first best split wins.
    pub fn fit(values: &[f64], labels: &[Label]) -> Result<Self> {
        if values.len() != labels.len() || values.is_empty() {
            return Err(Error::Validation("oracle needs equally many values and labels".into()));
        }
        let mut sorted: Vec<f64> = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut cuts = vec![sorted[0] - 1.0];
        cuts.extend(sorted.windows(2).map(|p| 0.5 * (p[0] + p[1])));
        cuts.push(sorted[sorted.len() - 1] + 1.0);
        let mut best = (ThresholdOracle { threshold: cuts[0], fake_below: true }, -1.0);
        for &t in &cuts {
            for fake_below in [true, false] {
                let o = ThresholdOracle { threshold: t, fake_below };
                let acc = o.accuracy(values, labels);
                if acc > best.1 {
                    best = (o, acc);
                }
            }
        }
        Ok(best.0)
    }

    pub fn predict(&self, value: f64) -> Label {
        if (value < self.threshold) == self.fake_below {
            Label::Fake
        } else {
            Label::Real
        }
    }

    pub fn accuracy(&self, values: &[f64], labels: &[Label]) -> f64 {
        let correct = values
            .iter()
            .zip(labels)
            .filter(|(v, l)| self.predict(**v) == **l)
            .count();
        correct as f64 / values.len() as f64
    }
}
