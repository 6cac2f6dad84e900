//! Synthetic fundus-like images for tests and demos.
//!
//! Each image is a bright retinal disc on black with an optic disc, a
//! darker macula, branching vessels and fine texture. Task labels are
//! planted: blurred frames are ungradable (task 1), bright lesions mark
//! referable cases (task 2) and lesions inside the macula mark edema
//! (task 3). Tasks 2 and 3 are only labeled for gradable frames.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{write_manifest, ImageRecord, TaskId};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Architecture, Backbone, BackboneSpec, ModelScale};
use crate::rng::{rng_for, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub image_size: usize,
    pub seed: u64,
    pub gradable_fraction: f64,
    /// Among gradable frames.
    pub referable_fraction: f64,
    /// Among referable frames.
    pub edema_fraction: f64,
    /// Blur sigma of ungradable frames, as a fraction of the image size.
    pub blur_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 100,
            image_size: 128,
            seed: 42,
            gradable_fraction: 0.565,
            referable_fraction: 0.5,
            edema_fraction: 0.5,
            blur_fraction: 0.03,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.image_size < 32 {
            return Err(Error::Config(format!("synthetic image_size must be at least 32, got {}", self.image_size)));
        }
        if !(unit(self.gradable_fraction) && unit(self.referable_fraction) && unit(self.edema_fraction)) {
            return Err(Error::Config("synthetic class fractions must lie in [0, 1]".into()));
        }
        if !(self.blur_fraction > 0.0) {
            return Err(Error::Config("blur_fraction must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lesions {
    None,
    /// Outside the macula only.
    Peripheral,
    /// At least half inside the macula.
    Macular,
}

/// Geometry of one synthetic frame, in pixels.
#[derive(Clone, Debug)]
pub struct Scene {
    pub size: usize,
    pub center: (f64, f64),
    pub radius: f64,
    pub tint: [f64; 3],
    pub optic_disc: (f64, f64, f64),
    pub macula: (f64, f64, f64),
    pub vessels: Vec<(Vec<(f64, f64)>, f64)>,
    pub lesions: Vec<(f64, f64, f64)>,
    pub texture_seed: u64,
}

fn point_in(rng: &mut Rng, cx: f64, cy: f64, r_min: f64, r_max: f64) -> (f64, f64) {
    let r = rng.random_range(r_min..r_max);
    let a = rng.random_range(0.0..2.0 * PI);
    (cx + r * a.cos(), cy + r * a.sin())
}

impl Scene {
    pub fn random(rng: &mut Rng, size: usize, lesions: Lesions) -> Self {
        let s = size as f64;
        let center = (s * rng.random_range(0.47..0.53), s * rng.random_range(0.47..0.53));
        let radius = s * rng.random_range(0.43..0.48);
        let tint = [
            rng.random_range(0.70..0.85),
            rng.random_range(0.30..0.42),
            rng.random_range(0.12..0.20),
        ];
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let optic_disc = (center.0 + side * 0.42 * radius, center.1 + rng.random_range(-0.05..0.05) * radius, 0.13 * radius);
        let macula = (center.0 - side * 0.08 * radius, center.1, 0.28 * radius);

        let mut vessels = Vec::new();
        let n_vessels = rng.random_range(7..11);
        for k in 0..n_vessels {
            let mut angle = 2.0 * PI * k as f64 / n_vessels as f64 + rng.random_range(-0.3..0.3);
            let mut p = (optic_disc.0, optic_disc.1);
            let mut path = vec![p];
            let step = 0.04 * radius;
            for _ in 0..rng.random_range(14..24) {
                angle += rng.random_range(-0.35..0.35);
                p = (p.0 + step * angle.cos(), p.1 + step * angle.sin());
                if (p.0 - center.0).hypot(p.1 - center.1) > radius {
                    break;
                }
                path.push(p);
            }
            vessels.push((path, s * rng.random_range(0.008..0.016)));
        }

        let mut spots = Vec::new();
        let (mx, my, mr) = macula;
        match lesions {
            Lesions::None => {}
            Lesions::Peripheral | Lesions::Macular => {
                let count: usize = rng.random_range(4..9);
                let macular = if lesions == Lesions::Macular { count.div_ceil(2) } else { 0 };
                for i in 0..count {
                    let r = s * rng.random_range(0.015..0.03);
                    let p = if i < macular {
                        point_in(rng, mx, my, 0.0, 0.8 * mr)
                    } else {
                        // rejection sample inside the retina, away from the macula
                        loop {
                            let q = point_in(rng, center.0, center.1, 0.0, 0.85 * radius);
                            if (q.0 - mx).hypot(q.1 - my) > 1.6 * mr + r {
                                break q;
                            }
                        }
                    };
                    spots.push((p.0, p.1, r));
                }
            }
        }
        Self {
            size,
            center,
            radius,
            tint,
            optic_disc,
            macula,
            vessels,
            lesions: spots,
            texture_seed: rng.random(),
        }
    }

    /// Render, then Gaussian-blur with `blur_sigma` pixels (0 = sharp).
    pub fn render(&self, blur_sigma: f64) -> Image<f64> {
        let n = self.size;
        let mut texture_rng = <Rng as rand::SeedableRng>::seed_from_u64(self.texture_seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let fine = Image::from_vec(1, n, n, (0..n * n).map(|_| normal.sample(&mut texture_rng)).collect());
        let coarse = Image::from_vec(1, n, n, (0..n * n).map(|_| normal.sample(&mut texture_rng)).collect())
            .gaussian_blur(n as f64 / 24.0);
        let coarse_scale = {
            let sd = (coarse.data().iter().map(|v| v * v).sum::<f64>() / (n * n) as f64).sqrt();
            if sd > 0.0 { 1.0 / sd } else { 0.0 }
        };

        let mut vessel = vec![0.0f64; n * n];
        for (path, width) in &self.vessels {
            for seg in path.windows(2) {
                stamp_segment(&mut vessel, n, seg[0], seg[1], *width);
            }
        }

        let soft = |d: f64, r: f64| (r - d + 0.5).clamp(0.0, 1.0);
        let (cx, cy) = self.center;
        let (dx, dy, dr) = self.optic_disc;
        let (mx, my, mr) = self.macula;
        let img = Image::from_fn(3, n, n, |c, y, x| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = (px - cx).hypot(py - cy);
            let inside = soft(d, self.radius);
            if inside == 0.0 {
                return 0.0;
            }
            let vignette = 1.0 - 0.35 * (d / self.radius).powi(2);
            let mut v = self.tint[c] * vignette;
            v *= 1.0 + 0.06 * coarse_scale * coarse.get(0, y, x);
            let m = (px - mx).hypot(py - my) / mr;
            v *= 1.0 - 0.35 * (-m * m).exp();
            let od = soft((px - dx).hypot(py - dy), dr);
            v = v * (1.0 - od) + od * [0.97, 0.88, 0.62][c];
            let vs = vessel[y * n + x];
            v = v * (1.0 - 0.75 * vs) + 0.75 * vs * [0.42, 0.08, 0.05][c];
            for &(lx, ly, lr) in &self.lesions {
                let l = soft((px - lx).hypot(py - ly), lr);
                if l > 0.0 {
                    v = v * (1.0 - l) + l * [0.99, 0.93, 0.45][c];
                }
            }
            v += 0.035 * fine.get(0, y, x);
            (v * inside).clamp(0.0, 1.0)
        });
        if blur_sigma > 0.0 {
            img.gaussian_blur(blur_sigma)
        } else {
            img
        }
    }
}

/// Soft-edged thick segment, max-combined into `mask`.
fn stamp_segment(mask: &mut [f64], n: usize, a: (f64, f64), b: (f64, f64), width: f64) {
    let half = width / 2.0;
    let pad = half + 1.0;
    let x0 = (a.0.min(b.0) - pad).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + pad).ceil() as usize).min(n);
    let y0 = (a.1.min(b.1) - pad).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + pad).ceil() as usize).min(n);
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = (vx * vx + vy * vy).max(1e-12);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((px - a.0) * vx + (py - a.1) * vy) / len2).clamp(0.0, 1.0);
            let d = (px - a.0 - t * vx).hypot(py - a.1 - t * vy);
            let v = (half - d + 0.5).clamp(0.0, 1.0);
            let m = &mut mask[y * n + x];
            *m = m.max(v);
        }
    }
}

/// Labels planted in one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Planted {
    pub gradable: bool,
    pub referable: bool,
    pub edema: bool,
}

/// Deterministic frame `index` of a synthetic set.
pub fn synthetic_frame(config: &SynthConfig, index: usize) -> (Image<f64>, Planted) {
    let mut rng = rng_for(config.seed, &["synth", &index.to_string()]);
    let gradable = rng.random_bool(config.gradable_fraction);
    let referable = gradable && rng.random_bool(config.referable_fraction);
    let edema = referable && rng.random_bool(config.edema_fraction);
    let lesions = match (referable, edema) {
        (true, true) => Lesions::Macular,
        (true, false) => Lesions::Peripheral,
        _ => Lesions::None,
    };
    let scene = Scene::random(&mut rng, config.image_size, lesions);
    let blur = if gradable { 0.0 } else { config.blur_fraction * config.image_size as f64 };
    (
        scene.render(blur),
        Planted {
            gradable,
            referable,
            edema,
        },
    )
}

/// Write `images/synth_NNNN.png` and `manifest.csv` under `dir`.
pub fn make_synthetic_dataset(dir: &Path, config: &SynthConfig) -> Result<Vec<ImageRecord>> {
    config.validate()?;
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    let mut records = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let (img, planted) = synthetic_frame(config, i);
        let id = format!("synth_{i:04}");
        let rel = Path::new("images").join(format!("{id}.png"));
        img.save_png(&dir.join(&rel))?;
        let mut r = ImageRecord::new(id, rel).with_label(TaskId::Quality, planted.gradable as u8);
        if planted.gradable {
            r = r
                .with_label(TaskId::Referable, planted.referable as u8)
                .with_label(TaskId::MacularEdema, planted.edema as u8);
        }
        records.push(r);
    }
    write_manifest(&dir.join("manifest.csv"), &records)?;
    Ok(records)
}

fn paint_blob(img: &mut Image<f64>, cx: f64, cy: f64, r: f64, value: f64) {
    let (h, w) = (img.height(), img.width());
    for y in 0..h {
        for x in 0..w {
            let d = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy);
            let a = (r - d + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                let v = img.get(c, y, x);
                img.set(c, y, x, v * (1.0 - a) + a * value);
            }
        }
    }
}

/// Frame with a blob in the left half: bright for the positive class, dark
/// for the negative one. The right half is identical across classes. The
/// background is a frame-filling textured retina with no optic disc, macula or
/// vessels, so the blob is the only structure.
pub fn left_feature_frame(seed: u64, index: usize, size: usize, positive: bool) -> Image<f64> {
    let mut rng = rng_for(seed, &["left-feature", &index.to_string()]);
    let mut scene = Scene::random(&mut rng, size, Lesions::None);
    scene.optic_disc.2 = 0.0;
    scene.radius = size as f64;
    scene.macula.2 = 1e-9;
    scene.vessels.clear();
    let mut img = scene.render(0.0);
    let s = size as f64;
    let (bx, by) = (s * rng.random_range(0.10..0.25), s * rng.random_range(0.35..0.65));
    let r = s * rng.random_range(0.07..0.10);
    paint_blob(&mut img, bx, by, r, if positive { 1.0 } else { 0.0 });
    img
}

/// Random compact foundation encoder archive for tests and demos.
pub fn write_compact_encoder(path: &Path, input_size: usize, seed: u64) -> Result<()> {
    let spec = BackboneSpec::new(Architecture::RetinalFoundation, ModelScale::Compact, input_size);
    let mut rng = rng_for(seed, &["synth", "encoder"]);
    let bb = Backbone::<f32>::skeleton(&spec, None, &mut rng);
    bb.save_weights(path)
}
