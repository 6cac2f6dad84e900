//! RGB-domain input: retina-centred crop, resize, local-mean-subtraction
//! colour normalization and training-time augmentation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Foreground threshold for retina localization, as a fraction of the
/// brightest pixel's mean intensity.
pub const FOREGROUND_FRACTION: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub rotation_degrees_max: f64,
    /// `(lo, hi)` with `0 < lo <= 1 <= hi`.
    pub zoom_range: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotation_degrees_max: 15.0,
            zoom_range: (0.9, 1.1),
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotation_degrees_max: 0.0,
            zoom_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.zoom_range;
        let probs_ok = (0.0..=1.0).contains(&self.hflip_prob) && (0.0..=1.0).contains(&self.vflip_prob);
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0) || !probs_ok || self.rotation_degrees_max < 0.0 {
            return Err(Error::Config(format!("invalid augmentation policy {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialConfig {
    pub crop_size: usize,
    /// Zero-pad frames smaller than `crop_size` instead of failing.
    pub pad_small: bool,
    /// Gaussian sigma as a fraction of image width.
    pub blur_scale: f64,
    pub neutral_offset: f64,
    pub augmentation: AugmentPolicy,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self {
            crop_size: 800,
            pad_small: false,
            blur_scale: 1.0 / 30.0,
            neutral_offset: 0.5,
            augmentation: AugmentPolicy::default(),
        }
    }
}

impl SpatialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        if !(self.blur_scale > 0.0 && self.blur_scale < 1.0) {
            return Err(Error::Config(format!(
                "blur_scale must be in (0, 1), got {}",
                self.blur_scale
            )));
        }
        self.augmentation.validate()
    }
}

/// Intensity-weighted centroid `(x, y)` of pixels brighter than
/// [`FOREGROUND_FRACTION`] of the maximum. Falls back to the frame centre
/// for an all-dark image.
pub fn retina_centroid<T: Scalar>(image: &Image<T>) -> (f64, f64) {
    let intensity = image.mean_intensity();
    let w = image.width();
    let max = intensity.iter().fold(T::zero(), |m, &v| m.max(v)).as_f64();
    let centre = ((image.width() as f64 - 1.0) / 2.0, (image.height() as f64 - 1.0) / 2.0);
    if max <= 0.0 {
        return centre;
    }
    let thr = FOREGROUND_FRACTION * max;
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for (i, v) in intensity.iter().enumerate() {
        let v = v.as_f64();
        if v > thr {
            sx += v * (i % w) as f64;
            sy += v * (i / w) as f64;
            sw += v;
        }
    }
    if sw == 0.0 {
        centre
    } else {
        (sx / sw, sy / sw)
    }
}

/// Top-left corner of a `crop_size` window centred on the retina centroid,
/// clamped inside the frame.
pub fn crop_window<T: Scalar>(image: &Image<T>, crop_size: usize) -> Result<(usize, usize)> {
    if image.width() < crop_size || image.height() < crop_size {
        return Err(Error::ImageTooSmall {
            width: image.width(),
            height: image.height(),
            crop: crop_size,
        });
    }
    let (cx, cy) = retina_centroid(image);
    let place = |c: f64, extent: usize| -> usize {
        let start = (c + 0.5 - crop_size as f64 / 2.0).round();
        start.clamp(0.0, (extent - crop_size) as f64) as usize
    };
    Ok((place(cx, image.width()), place(cy, image.height())))
}

pub fn crop_center<T: Scalar>(image: &Image<T>, crop_size: usize) -> Result<Image<T>> {
    let (x0, y0) = crop_window(image, crop_size)?;
    Ok(image.crop(x0, y0, crop_size, crop_size))
}

/// [`crop_center`] with the optional pad-then-crop fallback for small frames.
pub fn crop_or_pad<T: Scalar>(image: &Image<T>, crop_size: usize, pad_small: bool) -> Result<Image<T>> {
    if pad_small && (image.width() < crop_size || image.height() < crop_size) {
        return crop_center(&image.pad_to(crop_size), crop_size);
    }
    crop_center(image, crop_size)
}

/// `image - gaussian_blur(image) + neutral_offset`, without clamping.
pub fn local_mean_residual<T: Scalar>(image: &Image<T>, blur_scale: f64, neutral_offset: f64) -> Result<Image<T>> {
    if !(blur_scale > 0.0 && blur_scale < 1.0) {
        return Err(Error::Config(format!("blur_scale must be in (0, 1), got {blur_scale}")));
    }
    let sigma = T::lit(blur_scale * image.width() as f64);
    let blurred = image.gaussian_blur(sigma);
    let offset = T::lit(neutral_offset);
    let data = image
        .data()
        .iter()
        .zip(blurred.data())
        .map(|(&v, &b)| v - b + offset)
        .collect();
    Ok(Image::from_vec(image.channels(), image.height(), image.width(), data))
}

/// Local mean subtraction clamped to the valid `[0, 1]` range.
pub fn local_mean_subtract<T: Scalar>(image: &Image<T>, blur_scale: f64, neutral_offset: f64) -> Result<Image<T>> {
    Ok(local_mean_residual(image, blur_scale, neutral_offset)?.clamp01())
}

/// Draws of one augmentation, kept so a transform can be inspected or replayed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub rotation_degrees: f64,
    pub zoom: f64,
}

impl AugmentDraw {
    pub fn sample(policy: &AugmentPolicy, rng: &mut Rng) -> Self {
        let hflip = rng.random::<f64>() < policy.hflip_prob;
        let vflip = rng.random::<f64>() < policy.vflip_prob;
        let r = policy.rotation_degrees_max;
        let rotation_degrees = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let (lo, hi) = policy.zoom_range;
        let zoom = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Self {
            hflip,
            vflip,
            rotation_degrees,
            zoom,
        }
    }

    pub fn apply<T: Scalar>(&self, image: &Image<T>) -> Image<T> {
        let mut out = if self.hflip { image.flip_horizontal() } else { image.clone() };
        if self.vflip {
            out = out.flip_vertical();
        }
        if self.rotation_degrees != 0.0 || self.zoom != 1.0 {
            out = rotate_zoom(&out, self.rotation_degrees, self.zoom);
        }
        out
    }
}

/// Rotate about the centre and scale by `zoom` (> 1 magnifies), bilinear,
/// black outside the source frame. Output size equals input size.
pub fn rotate_zoom<T: Scalar>(image: &Image<T>, degrees: f64, zoom: f64) -> Image<T> {
    let (h, w) = (image.height(), image.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    let mut out = Image::new(image.channels(), h, w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = ((x as f64 - cx) / zoom, (y as f64 - cy) / zoom);
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            for ch in 0..image.channels() {
                let v = image.sample_bilinear(ch, T::lit(sy), T::lit(sx), T::zero());
                out.set(ch, y, x, v);
            }
        }
    }
    out
}

/// Random flips, rotation and zoom; deterministic in `rng`'s state.
pub fn augment<T: Scalar>(image: &Image<T>, rng: &mut Rng, policy: &AugmentPolicy) -> Image<T> {
    AugmentDraw::sample(policy, rng).apply(image)
}

/// Intermediate products of [`spatial_representation`], for stage dumps.
#[derive(Clone, Debug)]
pub struct SpatialStages<T> {
    pub cropped: Image<T>,
    pub resized: Image<T>,
    pub normalized: Image<T>,
}

/// Crop, resize to `target_size`, then normalize. No augmentation.
pub fn spatial_stages<T: Scalar>(image: &Image<T>, config: &SpatialConfig, target_size: usize) -> Result<SpatialStages<T>> {
    let cropped = crop_or_pad(image, config.crop_size, config.pad_small)?;
    let resized = cropped.resize(target_size, target_size);
    let normalized = local_mean_subtract(&resized, config.blur_scale, config.neutral_offset)?;
    Ok(SpatialStages {
        cropped,
        resized,
        normalized,
    })
}

pub fn spatial_representation<T: Scalar>(image: &Image<T>, config: &SpatialConfig, target_size: usize) -> Result<Image<T>> {
    Ok(spatial_stages(image, config, target_size)?.normalized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn disc(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> Image<f64> {
        Image::from_fn(3, h, w, |c, y, x| {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if d < r {
                0.4 + 0.1 * c as f64
            } else {
                0.0
            }
        })
    }

    #[test]
    fn identity_crop() {
        let img = disc(40, 40, 19.5, 19.5, 15.0);
        assert_eq!(crop_center(&img, 40).unwrap(), img);
    }

    #[test]
    fn crop_follows_brute_force_centroid() {
        let img = disc(120, 90, 80.0, 35.0, 12.0);
        // brute-force centroid over every pixel above threshold
        let inten: Vec<f64> = (0..90 * 120)
            .map(|i| (0..3).map(|c| img.get(c, i / 120, i % 120)).sum::<f64>() / 3.0)
            .collect();
        let max = inten.iter().cloned().fold(0.0, f64::max);
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for (i, &v) in inten.iter().enumerate() {
            if v > 0.05 * max {
                sx += v * (i % 120) as f64;
                sy += v * (i / 120) as f64;
                sw += v;
            }
        }
        let (ox, oy) = (sx / sw, sy / sw);
        let (x0, y0) = crop_window(&img, 32).unwrap();
        assert_eq!(x0, (ox + 0.5 - 16.0).round() as usize);
        assert_eq!(y0, (oy + 0.5 - 16.0).round() as usize);
        let c = crop_center(&img, 32).unwrap();
        assert_eq!((c.width(), c.height(), c.channels()), (32, 32, 3));
    }

    #[test]
    fn crop_window_clamped_inside_frame() {
        let img = disc(100, 100, 2.0, 97.0, 3.0);
        assert_eq!(crop_window(&img, 50).unwrap(), (0, 50));
    }

    #[test]
    fn small_image_errors_unless_padding() {
        let img = disc(30, 20, 15.0, 10.0, 5.0);
        let err = crop_center(&img, 32).unwrap_err();
        assert!(err.to_string().contains("pad_small"));
        let c = crop_or_pad(&img, 32, true).unwrap();
        assert_eq!((c.width(), c.height()), (32, 32));
    }

    #[test]
    fn constant_image_maps_to_neutral() {
        for v in [0.0, 0.2, 0.9] {
            let img = Image::<f64>::filled(3, 30, 30, v);
            let out = local_mean_subtract(&img, 1.0 / 30.0, 0.5).unwrap();
            assert!(out.data().iter().all(|p| (p - 0.5).abs() < 1e-12));
        }
    }

    #[test]
    fn bright_pixel_matches_dense_convolution() {
        let n = 41;
        let mut img = Image::<f64>::new(1, n, n);
        img.set(0, 20, 20, 1.0);
        let scale = 1.5 / n as f64;
        let out = local_mean_subtract(&img, scale, 0.5).unwrap();
        // dense 2D Gaussian over the same truncated window
        let sigma = scale * n as f64;
        let r = (3.0 * sigma).ceil() as i64;
        let mut norm = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                norm += (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            }
        }
        for y in 0..n as i64 {
            for x in 0..n as i64 {
                let (dx, dy) = (x - 20, y - 20);
                let blur = if dx.abs() <= r && dy.abs() <= r {
                    (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp() / norm
                } else {
                    0.0
                };
                let raw = if (x, y) == (20, 20) { 1.0 } else { 0.0 };
                let want = (raw - blur + 0.5).clamp(0.0, 1.0);
                assert!((out.get(0, y as usize, x as usize) - want).abs() < 1e-12);
            }
        }
        assert!(out.get(0, 20, 20) > 0.5);
        assert_eq!(out.get(0, 0, 0), 0.5);
    }

    #[test]
    fn rejects_bad_blur_scale() {
        let img = Image::<f32>::filled(1, 4, 4, 0.1);
        assert!(local_mean_subtract(&img, 0.0, 0.5).is_err());
        assert!(local_mean_subtract(&img, -0.1, 0.5).is_err());
    }

    #[test]
    fn identity_policy_is_identity() {
        let img = disc(20, 16, 8.0, 9.0, 5.0);
        let mut rng = Rng::seed_from_u64(1);
        assert_eq!(augment(&img, &mut rng, &AugmentPolicy::identity()), img);
    }

    #[test]
    fn augmentation_replays_and_keeps_size() {
        let img = disc(24, 24, 10.0, 13.0, 7.0);
        let p = AugmentPolicy::default();
        let a = augment(&img, &mut Rng::seed_from_u64(9), &p);
        let b = augment(&img, &mut Rng::seed_from_u64(9), &p);
        assert_eq!(a, b);
        assert_eq!((a.width(), a.height(), a.channels()), (24, 24, 3));
    }

    #[test]
    fn hflip_twice_restores() {
        let img = disc(24, 24, 10.0, 13.0, 7.0);
        let d = AugmentDraw {
            hflip: true,
            vflip: false,
            rotation_degrees: 0.0,
            zoom: 1.0,
        };
        assert_eq!(d.apply(&d.apply(&img)), img);
    }

    #[test]
    fn policy_validation() {
        let mut p = AugmentPolicy::default();
        p.zoom_range = (1.1, 1.2);
        assert!(p.validate().is_err());
        assert!(AugmentPolicy::default().validate().is_ok());
    }
}
