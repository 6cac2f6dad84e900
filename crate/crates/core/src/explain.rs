//! Grad-CAM heatmaps, overlays and report panels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{image_batch, softmax, Classifier};
use crate::scalar::Scalar;

pub const DEFAULT_ALPHA: f64 = 0.4;

/// Relevance map at model-input resolution, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub target_class: usize,
    pub layer: String,
    pub image_id: String,
    /// `(rows, cols)` of the map before upsampling.
    pub grid: (usize, usize),
    /// Rectified map before upsampling and normalization.
    pub coarse: Vec<f64>,
}

impl Heatmap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// `(y, x)` of the first maximum.
    pub fn peak(&self) -> (usize, usize) {
        let i = argmax(&self.values);
        (i / self.width, i % self.width)
    }

    /// `(row, col)` of the first maximum of the coarse map.
    pub fn coarse_peak(&self) -> (usize, usize) {
        let i = argmax(&self.coarse);
        (i / self.grid.1, i % self.grid.1)
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Share of mass in the left half; a centre column on odd widths counts
    /// half. Zero for an empty map.
    pub fn left_half_mass(&self) -> f64 {
        let total = self.total_mass();
        if total <= 0.0 {
            return 0.0;
        }
        let mut left = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.at(y, x);
                if 2 * x + 1 < self.width {
                    left += v;
                } else if 2 * x + 1 == self.width {
                    left += 0.5 * v;
                }
            }
        }
        left / total
    }

    /// Share of total mass held by the top `fraction` of pixels.
    pub fn top_mass(&self, fraction: f64) -> f64 {
        let total = self.total_mass();
        if total <= 0.0 {
            return 0.0;
        }
        let mut v = self.values.clone();
        v.sort_by(|a, b| b.total_cmp(a));
        let k = ((fraction * v.len() as f64).ceil() as usize).clamp(1, v.len());
        v[..k].iter().sum::<f64>() / total
    }

    /// Single-channel image of the map.
    pub fn to_image<T: Scalar>(&self) -> Image<T> {
        Image::from_vec(1, self.height, self.width, self.values.iter().map(|&v| T::lit(v)).collect())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Rectified gradient-weighted channel sum for `[C, P]` activations and
/// gradients over `P` spatial positions.
pub fn cam(activations: &[f64], gradients: &[f64], channels: usize) -> Vec<f64> {
    assert_eq!(activations.len(), gradients.len());
    let p = activations.len() / channels;
    let mut map = vec![0.0; p];
    for c in 0..channels {
        let g = &gradients[c * p..(c + 1) * p];
        let w = g.iter().sum::<f64>() / p as f64;
        for (m, a) in map.iter_mut().zip(&activations[c * p..(c + 1) * p]) {
            *m += w * a;
        }
    }
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    map
}

/// Bilinear resize (half-pixel centres, clamped edges).
pub fn upsample(coarse: &[f64], rows: usize, cols: usize, height: usize, width: usize) -> Vec<f64> {
    Image::from_vec(1, rows, cols, coarse.to_vec()).resize(width, height).data().to_vec()
}

/// Min-max normalization of a non-negative map. An all-zero map stays zero
/// and a constant positive map becomes all ones.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) {
        return vec![0.0; values.len()];
    }
    let range = max - min;
    if range <= max * 1e-12 {
        return vec![1.0; values.len()];
    }
    values.iter().map(|&v| ((v - min) / range).clamp(0.0, 1.0)).collect()
}

fn finish(coarse: Vec<f64>, grid: (usize, usize), size: (usize, usize), target_class: usize, layer: &str, image_id: &str) -> Heatmap {
    let up = upsample(&coarse, grid.0, grid.1, size.0, size.1);
    Heatmap {
        height: size.0,
        width: size.1,
        values: normalize(&up),
        target_class,
        layer: layer.to_string(),
        image_id: image_id.to_string(),
        grid,
        coarse,
    }
}

fn check_target(target_class: usize) -> Result<()> {
    if target_class > 1 {
        return Err(Error::Config(format!("target class must be 0 or 1, got {target_class}")));
    }
    Ok(())
}

/// Grad-CAM at a CNN's explanation layer.
pub fn gradcam<T: Scalar>(model: &mut Classifier<T>, image: &Image<T>, target_class: usize, image_id: &str) -> Result<Heatmap> {
    check_target(target_class)?;
    let (act, grad) = model.explanation_gradients(&image_batch(std::slice::from_ref(image)), target_class);
    if act.ndim() != 4 {
        return Err(Error::Data(format!(
            "explanation layer `{}` has no spatial structure (shape {:?})",
            model.backbone.explain_layer,
            act.shape()
        )));
    }
    let (c, h, w) = (act.dim(1), act.dim(2), act.dim(3));
    let a: Vec<f64> = act.data().iter().map(|v| v.as_f64()).collect();
    let g: Vec<f64> = grad.data().iter().map(|v| v.as_f64()).collect();
    let coarse = cam(&a, &g, c);
    Ok(finish(
        coarse,
        (h, w),
        (image.height(), image.width()),
        target_class,
        &model.backbone.explain_layer,
        image_id,
    ))
}

/// Grad-CAM over patch tokens: the class token is dropped and the rest are
/// laid out on their square grid, embedding dimensions acting as channels.
pub fn gradcam_transformer<T: Scalar>(
    model: &mut Classifier<T>,
    image: &Image<T>,
    target_class: usize,
    image_id: &str,
) -> Result<Heatmap> {
    check_target(target_class)?;
    let (act, grad) = model.explanation_gradients(&image_batch(std::slice::from_ref(image)), target_class);
    if act.ndim() != 3 || act.dim(1) < 2 {
        return Err(Error::Data(format!(
            "explanation layer `{}` is not a token sequence (shape {:?})",
            model.backbone.explain_layer,
            act.shape()
        )));
    }
    let (tokens, dim) = (act.dim(1) - 1, act.dim(2));
    let g = (tokens as f64).sqrt().round() as usize;
    if g * g != tokens {
        return Err(Error::Data(format!("{tokens} patch tokens do not form a square grid")));
    }
    // [1 + L, D] token-major -> [D, L] channel-major, skipping the class token
    let to_channels = |t: &[T]| -> Vec<f64> {
        let mut out = vec![0.0; dim * tokens];
        for p in 0..tokens {
            for (d, v) in t[(p + 1) * dim..(p + 2) * dim].iter().enumerate() {
                out[d * tokens + p] = v.as_f64();
            }
        }
        out
    };
    let coarse = cam(&to_channels(act.data()), &to_channels(grad.data()), dim);
    Ok(finish(
        coarse,
        (g, g),
        (image.height(), image.width()),
        target_class,
        &model.backbone.explain_layer,
        image_id,
    ))
}

/// Dispatch on the backbone family.
pub fn explain<T: Scalar>(model: &mut Classifier<T>, image: &Image<T>, target_class: usize, image_id: &str) -> Result<Heatmap> {
    if model.spec.architecture.is_transformer() {
        gradcam_transformer(model, image, target_class, image_id)
    } else {
        gradcam(model, image, target_class, image_id)
    }
}

const VIRIDIS: [[u8; 3]; 11] = [
    [68, 1, 84],
    [72, 36, 117],
    [65, 68, 135],
    [53, 95, 141],
    [42, 120, 142],
    [33, 145, 140],
    [34, 168, 132],
    [68, 191, 112],
    [122, 209, 81],
    [189, 223, 38],
    [253, 231, 37],
];

/// Viridis colour of `v` in `[0, 1]`, as RGB in `[0, 1]`.
pub fn viridis(v: f64) -> [f64; 3] {
    let t = v.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    std::array::from_fn(|c| ((1.0 - f) * a[c] as f64 + f * b[c] as f64) / 255.0)
}

/// Colorize `heatmap` and blend it over `image` at the image's resolution:
/// `(1 - alpha) * image + alpha * colour`. `alpha` is clamped to `[0, 1]`.
pub fn overlay<T: Scalar>(image: &Image<T>, heatmap: &Heatmap, alpha: f64) -> Image<T> {
    let alpha = alpha.clamp(0.0, 1.0);
    let rgb = if image.channels() == 3 { image.clone() } else { image.replicate(3) };
    let (h, w) = (rgb.height(), rgb.width());
    let map = heatmap.to_image::<f64>().resize(w, h);
    let mut out = rgb.clone();
    for y in 0..h {
        for x in 0..w {
            let col = viridis(map.get(0, y, x));
            for (c, cv) in col.iter().enumerate() {
                let v = (1.0 - alpha) * rgb.get(c, y, x).as_f64() + alpha * cv;
                out.set(c, y, x, T::lit(v));
            }
        }
    }
    out
}

/// Side-by-side `original | overlay` panel.
pub fn panel<T: Scalar>(original: &Image<T>, overlaid: &Image<T>) -> Image<T> {
    let a = if original.channels() == 3 { original.clone() } else { original.replicate(3) };
    let b = overlaid.resize(a.width(), a.height());
    let w = a.width();
    Image::from_fn(3, a.height(), 2 * w, |c, y, x| if x < w { a.get(c, y, x) } else { b.get(c, y, x - w) })
}

/// JSON sidecar content for one panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSummary {
    pub image_id: String,
    pub layer: String,
    pub target_class: usize,
    pub probability: f64,
    pub grid: (usize, usize),
    pub size: (usize, usize),
    /// `(y, x)` in heatmap pixels.
    pub peak: (usize, usize),
    /// Peak as fractions of height and width.
    pub peak_relative: (f64, f64),
    /// Share of mass held by the top 5/10/25/50 % of pixels.
    pub mass_quantiles: BTreeMap<String, f64>,
    pub left_half_mass: f64,
}

impl HeatmapSummary {
    pub fn new(heatmap: &Heatmap, probability: f64) -> Self {
        let peak = heatmap.peak();
        let mass_quantiles = [0.05, 0.10, 0.25, 0.50]
            .iter()
            .map(|&f| (format!("top_{:02}", (f * 100.0) as usize), heatmap.top_mass(f)))
            .collect();
        Self {
            image_id: heatmap.image_id.clone(),
            layer: heatmap.layer.clone(),
            target_class: heatmap.target_class,
            probability,
            grid: heatmap.grid,
            size: (heatmap.height, heatmap.width),
            peak,
            peak_relative: (
                (peak.0 as f64 + 0.5) / heatmap.height as f64,
                (peak.1 as f64 + 0.5) / heatmap.width as f64,
            ),
            mass_quantiles,
            left_half_mass: heatmap.left_half_mass(),
        }
    }
}

/// Positive-class probability for one preprocessed image.
pub fn probability<T: Scalar>(model: &Classifier<T>, image: &Image<T>) -> f64 {
    softmax(&model.logits(&image_batch(std::slice::from_ref(image)))).data()[1].as_f64()
}

/// One rendered panel in the HTML report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub task: String,
    pub domain: String,
    pub model: String,
    pub image_id: String,
    pub label: Option<u8>,
    pub probability: f64,
    /// Panel path relative to the report.
    pub panel: String,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Static HTML page with panels grouped by task and lettered in order.
pub fn write_html_report(path: &Path, entries: &[ReportEntry]) -> Result<()> {
    let mut by_task: BTreeMap<&str, Vec<&ReportEntry>> = BTreeMap::new();
    for e in entries {
        by_task.entry(&e.task).or_default().push(e);
    }
    let mut html = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Grad-CAM report</title>\n<style>\
         body{font-family:sans-serif;margin:1em}figure{display:inline-block;margin:.5em;vertical-align:top}\
         img{max-width:480px;display:block}figcaption{font-size:.85em}</style></head><body>\n",
    );
    let mut letter = 0u8;
    for (task, items) in by_task {
        let _ = writeln!(html, "<section><h2>{}</h2>", escape(task));
        for e in items {
            let tag = if letter < 26 { ((b'A' + letter) as char).to_string() } else { format!("#{}", letter + 1) };
            letter = letter.saturating_add(1);
            let label = e.label.map_or("-".to_string(), |l| l.to_string());
            let _ = writeln!(
                html,
                "<figure><img src=\"{}\" alt=\"{}\"><figcaption><b>{tag}</b> {} · {} · {} · label {label} · p = {:.3}</figcaption></figure>",
                escape(&e.panel),
                escape(&e.image_id),
                escape(&e.image_id),
                escape(&e.model),
                escape(&e.domain),
                e.probability
            );
        }
        html.push_str("</section>\n");
    }
    html.push_str("</body></html>\n");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, html)?;
    Ok(())
}
