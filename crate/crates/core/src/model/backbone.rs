use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    Activation, ActivationKind, BasicBlock, BatchNorm2d, Conv2d, GlobalAvgPool, InvertedResidual, Layer, MaxPool2d,
    PatchEmbed, Sequential, TokenPool, TokenPoolMode, TransformerBlock,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    LightweightCnn,
    ResidualCnn,
    PatchTransformer,
    RetinalFoundation,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::LightweightCnn,
        Architecture::ResidualCnn,
        Architecture::PatchTransformer,
        Architecture::RetinalFoundation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::LightweightCnn => "lightweight_cnn",
            Architecture::ResidualCnn => "residual_cnn",
            Architecture::PatchTransformer => "patch_transformer",
            Architecture::RetinalFoundation => "retinal_foundation",
        }
    }

    pub fn is_transformer(self) -> bool {
        matches!(self, Architecture::PatchTransformer | Architecture::RetinalFoundation)
    }

    pub fn pretrained_source(self) -> PretrainedSource {
        match self {
            Architecture::RetinalFoundation => PretrainedSource::RetinalFoundationCheckpoint,
            _ => PretrainedSource::GenericImages,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainedSource {
    GenericImages,
    RetinalFoundationCheckpoint,
}

/// Network width. `Reference` uses the published layer widths; `Compact`
/// shrinks every backbone so desk-scale runs fit on one CPU core.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelScale {
    #[default]
    Reference,
    Compact,
}

impl ModelScale {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelScale::Reference => "reference",
            ModelScale::Compact => "compact",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Cls,
    Mean,
}

/// Transformer encoder geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub patch: usize,
    pub pool: Pool,
}

impl VitConfig {
    pub fn for_scale(arch: Architecture, scale: ModelScale) -> Self {
        let pool = if arch == Architecture::RetinalFoundation { Pool::Mean } else { Pool::Cls };
        let (dim, depth, heads, mlp_dim, patch) = match (arch, scale) {
            (Architecture::RetinalFoundation, ModelScale::Reference) => (1024, 24, 16, 4096, 16),
            (Architecture::RetinalFoundation, ModelScale::Compact) => (96, 4, 4, 192, 8),
            (_, ModelScale::Reference) => (768, 12, 12, 3072, 16),
            (_, ModelScale::Compact) => (64, 4, 4, 128, 8),
        };
        Self {
            dim,
            depth,
            heads,
            mlp_dim,
            patch,
            pool,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub architecture: Architecture,
    #[serde(default)]
    pub scale: ModelScale,
    /// Square input side in pixels.
    pub input_size: usize,
    #[serde(default = "default_unfreeze")]
    pub unfreeze_fraction: f64,
    /// Encoder archive for `retinal_foundation`.
    #[serde(default)]
    pub foundation_checkpoint: Option<PathBuf>,
}

fn default_unfreeze() -> f64 {
    0.25
}

impl BackboneSpec {
    pub fn new(architecture: Architecture, scale: ModelScale, input_size: usize) -> Self {
        Self {
            architecture,
            scale,
            input_size,
            unfreeze_fraction: default_unfreeze(),
            foundation_checkpoint: None,
        }
    }

    pub fn pretrained_source(&self) -> PretrainedSource {
        self.architecture.pretrained_source()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.unfreeze_fraction) {
            return Err(Error::Config(format!(
                "unfreeze_fraction must be in [0, 1], got {}",
                self.unfreeze_fraction
            )));
        }
        if self.input_size < 32 {
            return Err(Error::Config(format!("input_size must be at least 32, got {}", self.input_size)));
        }
        if self.architecture == Architecture::RetinalFoundation && self.foundation_checkpoint.is_none() {
            return Err(Error::Config(
                "retinal_foundation requires `foundation_checkpoint` (encoder archive path)".into(),
            ));
        }
        if self.architecture == Architecture::PatchTransformer {
            let patch = VitConfig::for_scale(self.architecture, self.scale).patch;
            if self.input_size % patch != 0 {
                return Err(Error::Config(format!(
                    "input_size {} is not a multiple of the {patch}-pixel patch",
                    self.input_size
                )));
            }
        }
        Ok(())
    }
}

/// Feature extractor: stages ending in a pooled `[N, feature_dim]` output.
#[derive(Clone)]
pub struct Backbone<T: Scalar> {
    pub architecture: Architecture,
    pub stages: Sequential<T>,
    pub feature_dim: usize,
    /// The explanation activation is the output of this stage.
    pub explain_after: usize,
    pub explain_layer: String,
    pub vit: Option<VitConfig>,
    /// Whether weights came from a pretrained archive.
    pub pretrained_loaded: bool,
}

impl<T: Scalar> Backbone<T> {
    pub fn build(spec: &BackboneSpec, cache_dir: Option<&Path>, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        if spec.architecture == Architecture::RetinalFoundation {
            let path = spec.foundation_checkpoint.as_deref().expect("validated");
            let meta = archive::read_meta(path)?;
            let cfg: VitConfig = serde_json::from_value(meta["vit"].clone())
                .map_err(|e| Error::Format(format!("{}: encoder config: {e}", path.display())))?;
            if spec.input_size % cfg.patch != 0 {
                return Err(Error::Config(format!(
                    "input_size {} is not a multiple of the encoder's {}-pixel patch",
                    spec.input_size, cfg.patch
                )));
            }
            let mut bb = Self::skeleton(spec, Some(cfg), rng);
            let loaded = bb.load_weights(path, true)?;
            log::info!("loaded {loaded} encoder tensors from {}", path.display());
            bb.pretrained_loaded = true;
            return Ok(bb);
        }
        let mut bb = Self::skeleton(spec, None, rng);
        if let Some(dir) = cache_dir {
            let path = dir.join(format!("{}_{}.uwfckpt", spec.architecture, spec.scale.as_str()));
            if path.exists() {
                bb.load_weights(&path, false)?;
                bb.pretrained_loaded = true;
            } else {
                log::warn!("no pretrained weights at {}; using random initialisation", path.display());
            }
        }
        Ok(bb)
    }

    /// Randomly initialised network of the given shape; `vit` overrides the
    /// scale's transformer geometry.
    pub fn skeleton(spec: &BackboneSpec, vit_cfg: Option<VitConfig>, rng: &mut Rng) -> Self {
        match spec.architecture {
            Architecture::LightweightCnn => mobilenet_v2(spec.scale, rng),
            Architecture::ResidualCnn => resnet18(spec.scale, rng),
            arch => vit(
                arch,
                vit_cfg.unwrap_or_else(|| VitConfig::for_scale(arch, spec.scale)),
                spec.input_size,
                rng,
            ),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.stages.forward(x)
    }

    /// Copy matching tensors from an archive. Position embeddings are
    /// resampled when the patch grid differs. With `strict`, every encoder
    /// tensor except the readout norm must be present.
    pub fn load_weights(&mut self, path: &Path, strict: bool) -> Result<usize> {
        let ar = archive::read::<T>(path)?;
        let grid = self.grid();
        let mut loaded = 0;
        let mut missing = Vec::new();
        let mut assign = |name: &str, dst: &mut Tensor<T>| -> Result<()> {
            match ar.tensors.get(name) {
                Some(src) if src.shape() == dst.shape() => {
                    *dst = src.clone();
                    loaded += 1;
                }
                Some(src) if name == "pos_embed" && src.ndim() == 3 && src.dim(2) == dst.dim(2) => {
                    *dst = resize_pos_embed(src, grid.expect("vit grid"))?;
                    loaded += 1;
                }
                Some(src) => {
                    return Err(Error::Format(format!(
                        "{}: `{name}` has shape {:?}, expected {:?}",
                        path.display(),
                        src.shape(),
                        dst.shape()
                    )))
                }
                None => missing.push(name.to_string()),
            }
            Ok(())
        };
        for p in self.stages.params_mut() {
            assign(&p.name.clone(), &mut p.value)?;
        }
        for b in self.stages.buffers_mut() {
            assign(&b.name.clone(), &mut b.value)?;
        }
        missing.retain(|n| !n.starts_with("fc_norm.") && !n.starts_with("norm."));
        if strict && !missing.is_empty() {
            return Err(Error::Format(format!("{}: missing tensors {missing:?}", path.display())));
        }
        Ok(loaded)
    }

    /// Write the backbone as a loadable weight archive.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, &Tensor<T>)> = self.stages.params().into_iter().map(|p| (p.name.clone(), &p.value)).collect();
        tensors.extend(self.stages.buffers().into_iter().map(|b| (b.name.clone(), &b.value)));
        let meta = serde_json::json!({
            "kind": "encoder",
            "architecture": self.architecture,
            "vit": self.vit,
            "feature_dim": self.feature_dim,
        });
        archive::write(path, &meta, &tensors)
    }

    fn grid(&self) -> Option<(usize, usize)> {
        self.vit.map(|_| {
            // first stage of a transformer is the patch embedding
            let params = self.stages.layers[0].params();
            let pos = params.iter().find(|p| p.name == "pos_embed").expect("pos_embed");
            let g = ((pos.value.dim(1) - 1) as f64).sqrt().round() as usize;
            (g, g)
        })
    }
}

/// Bilinear resampling of a `[1, 1 + g*g, D]` position table to a new grid.
pub fn resize_pos_embed<T: Scalar>(src: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
    let d = src.dim(2);
    let l = src.dim(1) - 1;
    let g = (l as f64).sqrt().round() as usize;
    if g * g != l {
        return Err(Error::Format(format!("position table of {l} patches is not a square grid")));
    }
    let data = src.data();
    let planes: Vec<T> = (0..d).flat_map(|j| (0..l).map(move |t| data[(1 + t) * d + j])).collect();
    let resized = Image::from_vec(d, g, g, planes).resize(grid.1, grid.0);
    let nl = grid.0 * grid.1;
    let mut out = Tensor::zeros(&[1, 1 + nl, d]);
    out.data_mut()[..d].copy_from_slice(&data[..d]);
    for t in 0..nl {
        for j in 0..d {
            out.data_mut()[(1 + t) * d + j] = resized.data()[j * nl + t];
        }
    }
    Ok(out)
}

fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut n = (((v + d / 2.0) / d).floor() * d).max(d);
    if n < 0.9 * v {
        n += d;
    }
    n as usize
}

fn mobilenet_v2<T: Scalar>(scale: ModelScale, rng: &mut Rng) -> Backbone<T> {
    let alpha: f64 = match scale {
        ModelScale::Reference => 1.0,
        ModelScale::Compact => 0.35,
    };
    // (expansion, channels, repeats, first stride)
    const SETTINGS: [(usize, usize, usize, usize); 7] = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let last = make_divisible(1280.0 * alpha.max(1.0), 8);
    let mut c = make_divisible(32.0 * alpha, 8);
    let mut s = Sequential::new()
        .with(Conv2d::new("features.0.0", 3, c, 3, 2, 1, false, rng))
        .with(BatchNorm2d::new("features.0.1", c))
        .with(Activation::new(ActivationKind::Relu6));
    let mut idx = 1;
    for (t, ch, n, stride) in SETTINGS {
        let out = make_divisible(ch as f64 * alpha, 8);
        for i in 0..n {
            let st = if i == 0 { stride } else { 1 };
            s.push(InvertedResidual::new(&format!("features.{idx}"), c, out, st, t, rng));
            c = out;
            idx += 1;
        }
    }
    s.push(Conv2d::new(&format!("features.{idx}.0"), c, last, 1, 1, 0, false, rng));
    s.push(BatchNorm2d::new(&format!("features.{idx}.1"), last));
    s.push(Activation::new(ActivationKind::Relu6));
    let explain_after = s.len() - 1;
    s.push(GlobalAvgPool::new());
    Backbone {
        architecture: Architecture::LightweightCnn,
        stages: s,
        feature_dim: last,
        explain_after,
        explain_layer: format!("features.{idx}"),
        vit: None,
        pretrained_loaded: false,
    }
}

fn resnet18<T: Scalar>(scale: ModelScale, rng: &mut Rng) -> Backbone<T> {
    let w = match scale {
        ModelScale::Reference => 64,
        ModelScale::Compact => 16,
    };
    let mut s = Sequential::new()
        .with(Conv2d::new("conv1", 3, w, 7, 2, 3, false, rng))
        .with(BatchNorm2d::new("bn1", w))
        .with(Activation::new(ActivationKind::Relu))
        .with(MaxPool2d::new(3, 2, 1));
    let mut c = w;
    for (li, mult) in [1, 2, 4, 8].into_iter().enumerate() {
        let out = w * mult;
        for bi in 0..2 {
            let stride = if li > 0 && bi == 0 { 2 } else { 1 };
            s.push(BasicBlock::new(&format!("layer{}.{bi}", li + 1), c, out, stride, rng));
            c = out;
        }
    }
    let explain_after = s.len() - 1;
    s.push(GlobalAvgPool::new());
    Backbone {
        architecture: Architecture::ResidualCnn,
        stages: s,
        feature_dim: c,
        explain_after,
        explain_layer: "layer4".into(),
        vit: None,
        pretrained_loaded: false,
    }
}

fn vit<T: Scalar>(arch: Architecture, cfg: VitConfig, input_size: usize, rng: &mut Rng) -> Backbone<T> {
    let mut s = Sequential::new().with(PatchEmbed::new(3, cfg.dim, cfg.patch, input_size, rng));
    for i in 0..cfg.depth {
        s.push(TransformerBlock::new(&format!("blocks.{i}"), cfg.dim, cfg.heads, cfg.mlp_dim, rng));
    }
    let mode = match cfg.pool {
        Pool::Cls => TokenPoolMode::Cls,
        Pool::Mean => TokenPoolMode::MeanPatches,
    };
    s.push(TokenPool::new(mode, cfg.dim));
    Backbone {
        architecture: arch,
        stages: s,
        feature_dim: cfg.dim,
        // tokens entering the last encoder block
        explain_after: cfg.depth - 1,
        explain_layer: format!("blocks.{}.input", cfg.depth - 1),
        vit: Some(cfg),
        pretrained_loaded: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;
    use rand::SeedableRng;

    fn count(bb: &Backbone<f32>) -> usize {
        bb.stages.params().iter().map(|p| p.numel()).sum()
    }

    #[test]
    fn reference_widths_and_parameter_counts() {
        let mut rng = Rng::seed_from_u64(0);
        let mb = Backbone::<f32>::build(&BackboneSpec::new(Architecture::LightweightCnn, ModelScale::Reference, 224), None, &mut rng).unwrap();
        assert_eq!(mb.feature_dim, 1280);
        // torchvision mobilenet_v2 features: 2,223,872 parameters
        assert_eq!(count(&mb), 2_223_872);
        let rn = Backbone::<f32>::build(&BackboneSpec::new(Architecture::ResidualCnn, ModelScale::Reference, 224), None, &mut rng).unwrap();
        assert_eq!(rn.feature_dim, 512);
        // resnet18 without its 512x1000 classifier: 11,689,512 - 513,000
        assert_eq!(count(&rn), 11_176_512);
        assert_eq!(VitConfig::for_scale(Architecture::PatchTransformer, ModelScale::Reference).dim, 768);
        assert_eq!(VitConfig::for_scale(Architecture::RetinalFoundation, ModelScale::Reference).dim, 1024);
    }

    #[test]
    fn compact_backbones_produce_pooled_features() {
        let mut rng = Rng::seed_from_u64(1);
        let x = Tensor::<f32>::full(&[2, 3, 64, 64], 0.3);
        for arch in [Architecture::LightweightCnn, Architecture::ResidualCnn, Architecture::PatchTransformer] {
            let bb = Backbone::<f32>::build(&BackboneSpec::new(arch, ModelScale::Compact, 64), None, &mut rng).unwrap();
            let f = bb.forward(&x);
            assert_eq!(f.shape(), &[2, bb.feature_dim], "{arch}");
            assert!(f.all_finite());
        }
    }

    #[test]
    fn foundation_requires_checkpoint_and_loads_it() {
        let mut rng = Rng::seed_from_u64(2);
        let mut spec = BackboneSpec::new(Architecture::RetinalFoundation, ModelScale::Compact, 64);
        assert!(matches!(Backbone::<f32>::build(&spec, None, &mut rng), Err(Error::Config(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.uwfckpt");
        let enc = vit::<f32>(Architecture::RetinalFoundation, VitConfig::for_scale(Architecture::RetinalFoundation, ModelScale::Compact), 32, &mut rng);
        enc.save_weights(&path).unwrap();
        spec.foundation_checkpoint = Some(path);
        let bb = Backbone::<f32>::build(&spec, None, &mut rng).unwrap();
        assert!(bb.pretrained_loaded);
        let src = enc.stages.params()[3].value.clone();
        assert_eq!(bb.stages.params()[3].value, src);
        // 4x4 grid resampled to 8x8
        let pos = bb.stages.params().iter().find(|p| p.name == "pos_embed").unwrap().value.shape().to_vec();
        assert_eq!(pos, [1, 65, 96]);
    }

    #[test]
    fn pos_embed_resample_identity() {
        let mut rng = Rng::seed_from_u64(3);
        let t = crate::nn::normal::<f64>(&[1, 17, 5], 1.0, &mut rng);
        assert_eq!(resize_pos_embed(&t, (4, 4)).unwrap(), t);
    }

    #[test]
    fn divisibility_rule() {
        assert_eq!(make_divisible(32.0 * 0.35, 8), 16);
        assert_eq!(make_divisible(24.0, 8), 24);
        assert_eq!(make_divisible(160.0 * 0.35, 8), 56);
    }
}
