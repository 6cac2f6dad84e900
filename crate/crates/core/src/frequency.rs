//! Frequency-domain input: centred 2D DFT magnitude, clipped at a
//! per-image percentile, min-max normalized and replicated to three channels.
//!
//! The forward transform is unnormalized, so for an `h x w` image
//! `sum |F|^2 = h * w * sum |f|^2`.

use num_traits::Zero;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrequencyConfig {
    pub clip_percentile: f64,
}

impl Default for FrequencyConfig {
    fn default() -> Self {
        Self {
            clip_percentile: 0.99,
        }
    }
}

/// Magnitude spectrum with the zero-frequency bin at `(height / 2, width / 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralImage<T> {
    pub height: usize,
    pub width: usize,
    pub magnitude: Vec<T>,
    /// Set once the spectrum has been clipped.
    pub clip_percentile: Option<f64>,
    pub source_id: String,
}

impl<T: Scalar> SpectralImage<T> {
    pub fn at(&self, y: usize, x: usize) -> T {
        self.magnitude[y * self.width + x]
    }

    pub fn center(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    pub fn energy(&self) -> T {
        self.magnitude.iter().map(|&m| m * m).sum()
    }

    pub fn to_image(&self) -> Image<T> {
        Image::from_vec(1, self.height, self.width, self.magnitude.clone())
    }
}

/// In-place 2D FFT of a row-major `h x w` buffer.
fn fft2d<T: Scalar>(buf: &mut [Complex<T>], h: usize, w: usize) {
    let mut planner = FftPlanner::<T>::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::zero(); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

/// Centred magnitude of the unnormalized forward DFT of a single-channel image.
pub fn dft_magnitude<T: Scalar>(gray: &Image<T>, source_id: &str) -> Result<SpectralImage<T>> {
    if gray.channels() != 1 {
        return Err(Error::Data(format!(
            "dft_magnitude expects one channel, got {}",
            gray.channels()
        )));
    }
    let (h, w) = (gray.height(), gray.width());
    if h == 0 || w == 0 {
        return Err(Error::Data("dft_magnitude of an empty image".into()));
    }
    let mut buf: Vec<Complex<T>> = gray.data().iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft2d(&mut buf, h, w);
    let mut magnitude = vec![T::zero(); h * w];
    for y in 0..h {
        let sy = (y + h / 2) % h;
        for x in 0..w {
            let sx = (x + w / 2) % w;
            magnitude[sy * w + sx] = buf[y * w + x].norm();
        }
    }
    Ok(SpectralImage {
        height: h,
        width: w,
        magnitude,
        clip_percentile: None,
        source_id: source_id.to_string(),
    })
}

/// Nearest-rank quantile: the smallest sample with at least a `p` share of
/// the samples at or below it (sorted index `ceil(p * n) - 1`).
pub fn quantile<T: Scalar>(values: &[T], p: f64) -> T {
    assert!(!values.is_empty(), "quantile of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let rank = (p * sorted.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Cap every value at the spectrum's own `p`-quantile.
pub fn clip_at_percentile<T: Scalar>(spectrum: &SpectralImage<T>, p: f64) -> Result<SpectralImage<T>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("clip percentile must be in (0, 1], got {p}")));
    }
    let ceiling = quantile(&spectrum.magnitude, p);
    Ok(SpectralImage {
        magnitude: spectrum.magnitude.iter().map(|&v| v.min(ceiling)).collect(),
        clip_percentile: Some(p),
        ..spectrum.clone()
    })
}

/// Min-max scale to `[0, 1]`; `None` when the range is below `tol`.
fn normalize<T: Scalar>(values: &[T], tol: T) -> Option<Vec<T>> {
    let (lo, hi) = values
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi - lo > tol {
        Some(values.iter().map(|&v| (v - lo) / (hi - lo)).collect())
    } else {
        None
    }
}

/// Clipped spectrum scaled to `[0, 1]` at the spectrum's own resolution.
///
/// When clipping leaves a flat spectrum (fewer than `1 - p` of the bins are
/// non-zero, e.g. a constant image) the unclipped spectrum is normalized
/// instead, so the representation keeps its structure. "Flat" means a range
/// within FFT round-off of the spectrum's peak.
pub fn normalized_spectrum<T: Scalar>(color: &Image<T>, config: &FrequencyConfig, source_id: &str) -> Result<SpectralImage<T>> {
    let spectrum = dft_magnitude(&color.luminance(), source_id)?;
    let clipped = clip_at_percentile(&spectrum, config.clip_percentile)?;
    let peak = spectrum.magnitude.iter().fold(T::zero(), |m, &v| m.max(v));
    let n = T::from_usize_lossy(spectrum.magnitude.len());
    let tol = peak * T::epsilon() * n.sqrt() * T::lit(16.0);
    let magnitude = normalize(&clipped.magnitude, tol)
        .or_else(|| normalize(&spectrum.magnitude, tol))
        .unwrap_or_else(|| vec![T::zero(); spectrum.magnitude.len()]);
    Ok(SpectralImage {
        magnitude,
        ..clipped
    })
}

/// Backbone-ready frequency input: `target_size` square, three channels.
pub fn frequency_representation<T: Scalar>(
    color: &Image<T>,
    config: &FrequencyConfig,
    target_size: usize,
    source_id: &str,
) -> Result<Image<T>> {
    let spec = normalized_spectrum(color, config, source_id)?;
    Ok(spec
        .to_image()
        .resize(target_size, target_size)
        .clamp01()
        .replicate(3))
}

/// Fraction of spectral energy (`|F|^2`) inside the centred disc of radius
/// `radius_fraction * min(h, w) / 2`.
pub fn low_frequency_energy_fraction<T: Scalar>(spectrum: &SpectralImage<T>, radius_fraction: f64) -> f64 {
    let (cy, cx) = spectrum.center();
    let r = radius_fraction * spectrum.height.min(spectrum.width) as f64 / 2.0;
    let (mut inside, mut total) = (0.0, 0.0);
    for y in 0..spectrum.height {
        for x in 0..spectrum.width {
            let e = spectrum.at(y, x).as_f64().powi(2);
            total += e;
            let d2 = (y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2);
            if d2 <= r * r {
                inside += e;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        inside / total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_dc_only() {
        let n = 8;
        let c = 0.7;
        let img = Image::<f64>::filled(1, n, n, c);
        let s = dft_magnitude(&img, "c").unwrap();
        for y in 0..n {
            for x in 0..n {
                let want = if (y, x) == (n / 2, n / 2) { c * (n * n) as f64 } else { 0.0 };
                assert!((s.at(y, x) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut img = Image::<f64>::new(1, 6, 6);
        img.set(0, 0, 0, 1.0);
        let s = dft_magnitude(&img, "i").unwrap();
        assert!(s.magnitude.iter().all(|m| (m - 1.0).abs() < 1e-12));
    }

    #[test]
    fn empty_and_multichannel_rejected() {
        assert!(dft_magnitude(&Image::<f64>::new(1, 0, 4), "e").is_err());
        assert!(dft_magnitude(&Image::<f64>::new(3, 4, 4), "e").is_err());
    }

    #[test]
    fn clip_boundaries() {
        let flat = SpectralImage {
            height: 2,
            width: 2,
            magnitude: vec![3.0f64; 4],
            clip_percentile: None,
            source_id: "f".into(),
        };
        assert_eq!(clip_at_percentile(&flat, 0.99).unwrap().magnitude, flat.magnitude);
        let ramp = SpectralImage {
            magnitude: vec![1.0f64, 5.0, 2.0, 9.0],
            ..flat.clone()
        };
        assert_eq!(clip_at_percentile(&ramp, 1.0).unwrap().magnitude, ramp.magnitude);
        assert!(clip_at_percentile(&ramp, 0.0).is_err());
    }

    #[test]
    fn ceiling_is_nearest_rank_of_sorted_values() {
        let mut values: Vec<f64> = (1..=100).map(f64::from).collect();
        values.reverse();
        let s = SpectralImage {
            height: 10,
            width: 10,
            magnitude: values,
            clip_percentile: None,
            source_id: "r".into(),
        };
        let clipped = clip_at_percentile(&s, 0.99).unwrap();
        // sorted[ceil(0.99 * 100) - 1] = 99
        assert_eq!(clipped.magnitude.iter().cloned().fold(0.0, f64::max), 99.0);
        assert_eq!(clipped.magnitude[1..], s.magnitude[1..]);
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.51), 3.0);
        assert_eq!(quantile(&[7.0], 0.01), 7.0);
    }

    #[test]
    fn constant_image_representation_is_centre_spike() {
        let img = Image::<f64>::filled(3, 16, 16, 0.4);
        let rep = frequency_representation(&img, &FrequencyConfig::default(), 16, "c").unwrap();
        assert_eq!(rep.channels(), 3);
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let want = if (y, x) == (8, 8) { 1.0 } else { 0.0 };
                    assert!((rep.get(c, y, x) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn representation_is_deterministic_and_bounded() {
        let img = Image::<f32>::from_fn(3, 20, 24, |c, y, x| ((x * 7 + y * 3 + c) % 11) as f32 / 11.0);
        let cfg = FrequencyConfig::default();
        let a = frequency_representation(&img, &cfg, 12, "x").unwrap();
        let b = frequency_representation(&img, &cfg, 12, "x").unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!((a.width(), a.height()), (12, 12));
    }
}
