//! Planar floating-point images and the resampling/filtering primitives the
//! preprocessing stages share. Intensities live in `[0, 1]`.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel-major image: `data[c * h * w + y * w + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, T::zero())
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        f: impl Fn(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_vec(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    /// Per-pixel mean over channels.
    pub fn mean_intensity(&self) -> Vec<T> {
        let n = self.height * self.width;
        let mut out = vec![T::zero(); n];
        for c in 0..self.channels {
            for (o, &v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        let k = T::from_usize_lossy(self.channels.max(1));
        out.iter_mut().for_each(|v| *v /= k);
        out
    }

    /// Rec. 601 luma for RGB input; single-channel input passes through.
    pub fn luminance(&self) -> Image<T> {
        if self.channels == 1 {
            return self.clone();
        }
        if self.channels != 3 {
            let m = self.mean_intensity();
            return Image::from_vec(1, self.height, self.width, m);
        }
        let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
        let data = self
            .plane(0)
            .iter()
            .zip(self.plane(1))
            .zip(self.plane(2))
            .map(|((&r, &g), &b)| wr * r + wg * g + wb * b)
            .collect();
        Image::from_vec(1, self.height, self.width, data)
    }

    /// Replicate a single-channel image to `n` channels.
    pub fn replicate(&self, n: usize) -> Image<T> {
        assert_eq!(self.channels, 1, "replicate expects one channel");
        let mut data = Vec::with_capacity(n * self.data.len());
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Image::from_vec(n, self.height, self.width, data)
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image<T> {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        Image::from_fn(self.channels, h, w, |c, y, x| self.get(c, y0 + y, x0 + x))
    }

    /// Zero-pad symmetrically so both sides are at least `min_side`.
    pub fn pad_to(&self, min_side: usize) -> Image<T> {
        let h = self.height.max(min_side);
        let w = self.width.max(min_side);
        let oy = (h - self.height) / 2;
        let ox = (w - self.width) / 2;
        let mut out = Image::new(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y + oy, x + ox, self.get(c, y, x));
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image<T> {
        let w = self.width;
        Image::from_fn(self.channels, self.height, w, |c, y, x| self.get(c, y, w - 1 - x))
    }

    pub fn flip_vertical(&self) -> Image<T> {
        let h = self.height;
        Image::from_fn(self.channels, h, self.width, |c, y, x| self.get(c, h - 1 - y, x))
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres on integers),
    /// `fill` outside the frame.
    pub fn sample_bilinear(&self, c: usize, y: T, x: T, fill: T) -> T {
        let (hf, wf) = (T::from_usize_lossy(self.height), T::from_usize_lossy(self.width));
        let one = T::one();
        if x < -one || y < -one || x > wf || y > hf {
            return fill;
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let px = |yy: T, xx: T| -> T {
            if xx < T::zero() || yy < T::zero() || xx >= wf || yy >= hf {
                fill
            } else {
                self.get(c, yy.to_usize().unwrap_or(0), xx.to_usize().unwrap_or(0))
            }
        };
        let a = px(y0, x0);
        let b = px(y0, x0 + one);
        let d = px(y0 + one, x0);
        let e = px(y0 + one, x0 + one);
        (one - fy) * ((one - fx) * a + fx * b) + fy * ((one - fx) * d + fx * e)
    }

    /// Resize to `w x h`: area averaging when shrinking an axis, bilinear
    /// (half-pixel centres, clamped edges) when enlarging.
    pub fn resize(&self, w: usize, h: usize) -> Image<T> {
        if w == self.width && h == self.height {
            return self.clone();
        }
        let rows = resample_axis_weights::<T>(self.height, h);
        let cols = resample_axis_weights::<T>(self.width, w);
        let mut out = Image::new(self.channels, h, w);
        let mut tmp = vec![T::zero(); h * self.width];
        for c in 0..self.channels {
            let src = self.plane(c);
            tmp.iter_mut().for_each(|v| *v = T::zero());
            for (oy, taps) in rows.iter().enumerate() {
                for &(sy, wt) in taps {
                    let srow = &src[sy * self.width..(sy + 1) * self.width];
                    let trow = &mut tmp[oy * self.width..(oy + 1) * self.width];
                    for (t, &s) in trow.iter_mut().zip(srow) {
                        *t += wt * s;
                    }
                }
            }
            let dst = out.plane_mut(c);
            for oy in 0..h {
                let trow = &tmp[oy * self.width..(oy + 1) * self.width];
                for (ox, taps) in cols.iter().enumerate() {
                    let mut acc = T::zero();
                    for &(sx, wt) in taps {
                        acc += wt * trow[sx];
                    }
                    dst[oy * w + ox] = acc;
                }
            }
        }
        out
    }

    /// Separable Gaussian blur with mirrored borders (`dcb|abcd|cba`).
    /// The kernel is truncated at `ceil(3 sigma)` and renormalized.
    pub fn gaussian_blur(&self, sigma: T) -> Image<T> {
        let kernel = gaussian_kernel(sigma);
        let r = (kernel.len() / 2) as isize;
        let (h, w) = (self.height, self.width);
        let mut out = Image::new(self.channels, h, w);
        let mut tmp = vec![T::zero(); h * w];
        let xi: Vec<Vec<usize>> = (0..w)
            .map(|x| (-r..=r).map(|d| reflect_index(x as isize + d, w)).collect())
            .collect();
        let yi: Vec<Vec<usize>> = (0..h)
            .map(|y| (-r..=r).map(|d| reflect_index(y as isize + d, h)).collect())
            .collect();
        for c in 0..self.channels {
            let src = self.plane(c);
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                for x in 0..w {
                    let mut acc = T::zero();
                    for (k, &sx) in kernel.iter().zip(&xi[x]) {
                        acc += *k * row[sx];
                    }
                    tmp[y * w + x] = acc;
                }
            }
            let dst = out.plane_mut(c);
            for y in 0..h {
                let d = &mut dst[y * w..(y + 1) * w];
                d.iter_mut().for_each(|v| *v = T::zero());
                for (k, &sy) in kernel.iter().zip(&yi[y]) {
                    let trow = &tmp[sy * w..(sy + 1) * w];
                    for (o, &t) in d.iter_mut().zip(trow) {
                        *o += *k * t;
                    }
                }
            }
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.channels, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor<T>) -> Image<T> {
        assert_eq!(t.ndim(), 3, "expected a [C, H, W] tensor");
        Image::from_vec(t.dim(0), t.dim(1), t.dim(2), t.data().to_vec())
    }

    /// Decode any supported raster (PNG/JPEG/TIFF) as RGB in `[0, 1]`.
    pub fn load(path: &Path) -> Result<Image<T>> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let rgb = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&rgb))
    }

    pub fn from_rgb8(rgb: &RgbImage) -> Image<T> {
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let scale = T::lit(1.0 / 255.0);
        let mut out = Image::new(3, h, w);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, T::from_usize_lossy(px[c] as usize) * scale);
            }
        }
        out
    }

    /// Quantize to 8-bit RGB (single-channel images are shown as gray).
    pub fn to_rgb8(&self) -> RgbImage {
        let q = |v: T| -> u8 {
            let f = v.as_f64().clamp(0.0, 1.0);
            (f * 255.0).round() as u8
        };
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            if self.channels >= 3 {
                Rgb([q(self.get(0, y, x)), q(self.get(1, y, x)), q(self.get(2, y, x))])
            } else {
                let g = q(self.get(0, y, x));
                Rgb([g, g, g])
            }
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Mirror an out-of-range index back into `0..n` (`dcb|abcd|cba`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Normalized 1D Gaussian taps, radius `ceil(3 sigma)` (at least 1).
pub fn gaussian_kernel<T: Scalar>(sigma: T) -> Vec<T> {
    let s = sigma.as_f64();
    let r = (3.0 * s).ceil().max(1.0) as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * s * s)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| T::lit(v / total)).collect()
}

/// Per-output-sample list of `(source index, weight)` for a 1D resize.
fn resample_axis_weights<T: Scalar>(src: usize, dst: usize) -> Vec<Vec<(usize, T)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            if dst < src {
                // box filter over the source footprint [o*scale, (o+1)*scale)
                let lo = o as f64 * scale;
                let hi = lo + scale;
                let mut taps = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < src {
                    let a = (i as f64).max(lo);
                    let b = ((i + 1) as f64).min(hi);
                    if b > a {
                        taps.push((i, T::lit((b - a) / scale)));
                    }
                    i += 1;
                }
                taps
            } else {
                let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(src - 1);
                let f = x - x0 as f64;
                if x1 == x0 || f == 0.0 {
                    vec![(x0, T::one())]
                } else {
                    vec![(x0, T::lit(1.0 - f)), (x1, T::lit(f))]
                }
            }
        })
        .collect()
}
