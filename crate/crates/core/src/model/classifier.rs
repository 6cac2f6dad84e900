use std::path::Path;

use sha2::{Digest, Sha256};

use super::backbone::{Backbone, BackboneSpec};
use super::loss::softmax;
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Activation, ActivationKind, Buffer, Ctx, Dropout, Layer, Linear, Param, Sequential};
use crate::rng::{rng_for, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HEAD_HIDDEN: usize = 256;
pub const HEAD_DROPOUT: f64 = 0.3;

/// `Linear(in, 256) -> ReLU -> Dropout(0.3) -> Linear(256, 2)`.
pub fn mlp_head<T: Scalar>(prefix: &str, in_features: usize, rng: &mut Rng) -> Sequential<T> {
    Sequential::new()
        .with(Linear::new(&format!("{prefix}.0"), in_features, HEAD_HIDDEN, rng))
        .with(Activation::new(ActivationKind::Relu))
        .with(Dropout::new(HEAD_DROPOUT))
        .with(Linear::new(&format!("{prefix}.3"), HEAD_HIDDEN, 2, rng))
}

/// Backbone plus a two-class MLP head, tied to one input domain.
#[derive(Clone)]
pub struct Classifier<T: Scalar> {
    pub spec: BackboneSpec,
    pub domain: Domain,
    pub backbone: Backbone<T>,
    pub head: Sequential<T>,
    train_from: usize,
}

impl<T: Scalar> Classifier<T> {
    /// Fresh model. The same `seed` always yields the same initial weights.
    pub fn build(spec: &BackboneSpec, domain: Domain, cache_dir: Option<&Path>, seed: u64) -> Result<Self> {
        let arch = spec.architecture.as_str();
        let mut rng = rng_for(seed, &["init", arch, "backbone"]);
        let backbone = Backbone::build(spec, cache_dir, &mut rng)?;
        let mut head_rng = rng_for(seed, &["init", arch, "head"]);
        let head = mlp_head("head", backbone.feature_dim, &mut head_rng);
        Ok(Self {
            spec: spec.clone(),
            domain,
            backbone,
            head,
            train_from: 0,
        })
    }

    pub fn from_parts(spec: BackboneSpec, domain: Domain, backbone: Backbone<T>, head: Sequential<T>) -> Self {
        Self {
            spec,
            domain,
            backbone,
            head,
            train_from: 0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim
    }

    pub fn features(&self, x: &Tensor<T>) -> Tensor<T> {
        self.backbone.forward(x)
    }

    pub fn logits(&self, x: &Tensor<T>) -> Tensor<T> {
        self.head.forward(&self.features(x))
    }

    /// `[N, 2]` class probabilities.
    pub fn probabilities(&self, x: &Tensor<T>) -> Tensor<T> {
        softmax(&self.logits(x))
    }

    pub fn check_domain(&self, domain: Domain) -> Result<()> {
        if domain != self.domain {
            return Err(Error::DomainMismatch {
                expected: self.domain.to_string(),
                found: domain.to_string(),
            });
        }
        Ok(())
    }

    /// Positive-class probability for preprocessed images of `domain`.
    pub fn predict_proba(&self, images: &[Image<T>], domain: Domain, batch_size: usize) -> Result<Vec<T>> {
        self.check_domain(domain)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch_size.max(1)) {
            let p = self.probabilities(&image_batch(chunk));
            out.extend(p.data().chunks_exact(2).map(|r| r[1]));
        }
        Ok(out)
    }

    /// Pooled pre-head embeddings, one row per image.
    pub fn extract_features(&self, images: &[Image<T>], domain: Domain, batch_size: usize) -> Result<Tensor<T>> {
        self.check_domain(domain)?;
        let f = self.feature_dim();
        let mut data = Vec::with_capacity(images.len() * f);
        for chunk in images.chunks(batch_size.max(1)) {
            data.extend_from_slice(self.features(&image_batch(chunk)).data());
        }
        Ok(Tensor::from_vec(&[images.len(), f], data))
    }

    /// Training forward pass. Stages before the first trainable one run in
    /// inference mode and are skipped by [`Classifier::backward`].
    pub fn forward_train(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Tensor<T> {
        let stages = &self.backbone.stages;
        self.train_from = stages.layers.iter().position(|l| l.any_trainable()).unwrap_or(stages.len());
        let n = stages.len();
        let h = stages.forward_range(x, 0..self.train_from);
        let h = self.backbone.stages.forward_train_range(&h, ctx, self.train_from..n);
        self.head.forward_train(&h, ctx)
    }

    pub fn backward(&mut self, dlogits: &Tensor<T>) {
        let g = self.head.backward(dlogits);
        let n = self.backbone.stages.len();
        if self.train_from < n {
            self.backbone.stages.backward_range(&g, self.train_from..n);
        }
    }

    /// Activation at the explanation layer and the gradient of the
    /// `target` logit (summed over the batch) with respect to it.
    pub fn explanation_gradients(&mut self, x: &Tensor<T>, target: usize) -> (Tensor<T>, Tensor<T>) {
        let e = self.backbone.explain_after;
        let n = self.backbone.stages.len();
        let act = self.backbone.stages.forward_range(x, 0..e + 1);
        let mut rng = rng_for(0, &["explain"]);
        let mut ctx = Ctx {
            training: false,
            rng: &mut rng,
        };
        let h = self.backbone.stages.forward_train_range(&act, &mut ctx, e + 1..n);
        let logits = self.head.forward_train(&h, &mut ctx);
        let mut d = Tensor::zeros(logits.shape());
        for r in d.data_mut().chunks_exact_mut(2) {
            r[target] = T::one();
        }
        let g = self.head.backward(&d);
        let g = self.backbone.stages.backward_range(&g, e + 1..n);
        self.zero_grad();
        self.clear_cache();
        (act, g)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.backbone.stages.params();
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.backbone.stages.params_mut();
        v.extend(self.head.params_mut());
        v
    }

    pub fn buffers(&self) -> Vec<&Buffer<T>> {
        self.backbone.stages.buffers()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        self.backbone.stages.buffers_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn clear_cache(&mut self) {
        self.backbone.stages.clear_cache();
        self.head.clear_cache();
    }

    /// Snapshot of every parameter and buffer value, in a stable order.
    pub fn state(&self) -> Vec<Tensor<T>> {
        let mut v: Vec<Tensor<T>> = self.params().iter().map(|p| p.value.clone()).collect();
        v.extend(self.buffers().iter().map(|b| b.value.clone()));
        v
    }

    pub fn restore(&mut self, state: &[Tensor<T>]) {
        let np = self.params().len();
        for (p, s) in self.params_mut().into_iter().zip(&state[..np]) {
            p.value = s.clone();
        }
        for (b, s) in self.buffers_mut().into_iter().zip(&state[np..]) {
            b.value = s.clone();
        }
    }

    /// Freeze the whole backbone, keep the head trainable.
    pub fn freeze_backbone(&mut self) {
        for p in self.backbone.stages.params_mut() {
            p.trainable = false;
        }
        for p in self.head.params_mut() {
            p.trainable = true;
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in self.params_mut() {
            p.trainable = true;
        }
    }

    /// Freeze the backbone, then release whole leaf layers from the deepest
    /// end until at least `fraction` of backbone parameters are trainable.
    /// Returns the number of released backbone parameters.
    pub fn unfreeze_deepest(&mut self, fraction: f64) -> usize {
        self.freeze_backbone();
        let mut params = self.backbone.stages.params_mut();
        let total: usize = params.iter().map(|p| p.numel()).sum();
        let target = fraction * total as f64;
        let mut released = 0usize;
        let mut i = params.len();
        while i > 0 && (released as f64) < target {
            let unit = params[i - 1].unit().to_string();
            while i > 0 && params[i - 1].unit() == unit {
                params[i - 1].trainable = true;
                released += params[i - 1].numel();
                i -= 1;
            }
        }
        released
    }

    pub fn trainable_backbone_params(&self) -> usize {
        self.backbone.stages.params().iter().filter(|p| p.trainable).map(|p| p.numel()).sum()
    }

    pub fn backbone_param_count(&self) -> usize {
        self.backbone.stages.params().iter().map(|p| p.numel()).sum()
    }

    /// SHA-256 over the backbone parameters matching `filter` and the
    /// buffers (running statistics) of the layers that own them.
    pub fn backbone_hash(&self, filter: impl Fn(&Param<T>) -> bool) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        let mut units = std::collections::BTreeSet::new();
        for p in self.backbone.stages.params().into_iter().filter(|p| filter(p)) {
            units.insert(p.unit().to_string());
            h.update(p.name.as_bytes());
            buf.clear();
            p.value.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        for b in self.backbone.stages.buffers() {
            let unit = b.name.rsplit_once('.').map_or(b.name.as_str(), |(u, _)| u);
            if !units.contains(unit) {
                continue;
            }
            h.update(b.name.as_bytes());
            buf.clear();
            b.value.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Stack equally sized images into `[N, C, H, W]`.
pub fn image_batch<T: Scalar>(images: &[Image<T>]) -> Tensor<T> {
    let first = images.first().expect("empty batch");
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        assert_eq!((im.channels(), im.height(), im.width()), (c, h, w), "ragged batch");
        data.extend_from_slice(im.data());
    }
    Tensor::from_vec(&[images.len(), c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::backbone::{Architecture, ModelScale};

    fn compact(arch: Architecture) -> Classifier<f64> {
        Classifier::build(&BackboneSpec::new(arch, ModelScale::Compact, 32), Domain::Rgb, None, 7).unwrap()
    }

    fn images(n: usize) -> Vec<Image<f64>> {
        (0..n)
            .map(|i| Image::from_fn(3, 32, 32, |c, y, x| ((x * 3 + y * 5 + c + i * 7) % 13) as f64 / 13.0))
            .collect()
    }

    #[test]
    fn probabilities_sum_to_one_and_batching_is_invariant() {
        let m = compact(Architecture::ResidualCnn);
        let imgs = images(5);
        let p = m.probabilities(&image_batch(&imgs));
        for r in p.data().chunks(2) {
            assert!((r[0] + r[1] - 1.0).abs() < 1e-6);
        }
        let a = m.predict_proba(&imgs, Domain::Rgb, 5).unwrap();
        let b = m.predict_proba(&imgs, Domain::Rgb, 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
            assert!((0.0..=1.0).contains(x));
        }
        assert!(matches!(m.predict_proba(&imgs, Domain::Frequency, 2), Err(Error::DomainMismatch { .. })));
    }

    #[test]
    fn same_seed_same_head() {
        let a = compact(Architecture::LightweightCnn);
        let b = compact(Architecture::LightweightCnn);
        assert_eq!(a.head.params()[0].value, b.head.params()[0].value);
    }

    #[test]
    fn unfreeze_fraction_counts() {
        let mut m = compact(Architecture::ResidualCnn);
        assert_eq!(m.unfreeze_deepest(0.0), 0);
        let total = m.backbone_param_count();
        let released = m.unfreeze_deepest(0.25);
        assert_eq!(released, m.trainable_backbone_params());
        assert!(released as f64 >= 0.25 * total as f64);
        // removing the shallowest released unit drops below the target
        let params = m.backbone.stages.params();
        let first = params.iter().position(|p| p.trainable).unwrap();
        let unit = params[first].unit();
        let unit_size: usize = params.iter().filter(|p| p.unit() == unit).map(|p| p.numel()).sum();
        assert!(((released - unit_size) as f64) < 0.25 * total as f64);
        assert_eq!(m.unfreeze_deepest(1.0), total);
    }
}
