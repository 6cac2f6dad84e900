use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::backbone::{Architecture, Backbone, BackboneSpec, VitConfig};
use super::classifier::{mlp_head, Classifier};
use super::train::{History, Stage, TrainConfig};
use crate::archive;
use crate::data::TaskId;
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_EXT: &str = "uwfckpt";

/// `{task}_{domain}_{architecture}_{seed}.uwfckpt`
pub fn checkpoint_name(task: TaskId, domain: Domain, architecture: Architecture, seed: u64) -> String {
    format!("{task}_{domain}_{architecture}_{seed}.{CHECKPOINT_EXT}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub task: TaskId,
    pub domain: Domain,
    pub spec: BackboneSpec,
    pub vit: Option<VitConfig>,
    pub feature_dim: usize,
    pub feature_layer: String,
    pub explain_layer: String,
    pub pretrained_loaded: bool,
    pub seed: u64,
    pub split_seed: u64,
    pub train_config: TrainConfig,
    pub stages: Vec<Stage>,
    pub histories: Vec<History>,
    /// Snapshot of the run configuration that produced this model.
    pub run_config: Value,
}

impl CheckpointMeta {
    /// Best validation AUROC of the final stage.
    pub fn best_val_auroc(&self) -> Option<f64> {
        self.histories.last().map(|h| h.best_val_auroc)
    }
}

/// Trained weights plus everything needed to reproduce and audit them.
#[derive(Clone)]
pub struct TrainedModel<T: Scalar> {
    pub model: Classifier<T>,
    pub meta: CheckpointMeta,
}

impl<T: Scalar> TrainedModel<T> {
    pub fn id(&self) -> String {
        checkpoint_name(self.meta.task, self.meta.domain, self.meta.spec.architecture, self.meta.seed)
            .trim_end_matches(&format!(".{CHECKPOINT_EXT}"))
            .to_string()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, &Tensor<T>)> = self.model.params().into_iter().map(|p| (p.name.clone(), &p.value)).collect();
        tensors.extend(self.model.buffers().into_iter().map(|b| (b.name.clone(), &b.value)));
        archive::write(path, &serde_json::to_value(&self.meta)?, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ar = archive::read::<T>(path)?;
        let meta: CheckpointMeta = serde_json::from_value(ar.meta)
            .map_err(|e| Error::Format(format!("{}: checkpoint metadata: {e}", path.display())))?;
        if meta.kind != "classifier" {
            return Err(Error::Format(format!("{}: not a classifier checkpoint", path.display())));
        }
        let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut backbone = Backbone::skeleton(&meta.spec, meta.vit, &mut rng);
        backbone.pretrained_loaded = meta.pretrained_loaded;
        let head = mlp_head("head", backbone.feature_dim, &mut rng);
        let mut model = Classifier::from_parts(meta.spec.clone(), meta.domain, backbone, head);
        let mut missing = Vec::new();
        for p in model.params_mut() {
            match ar.tensors.get(&p.name) {
                Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
                _ => missing.push(p.name.clone()),
            }
        }
        for b in model.buffers_mut() {
            match ar.tensors.get(&b.name) {
                Some(t) if t.shape() == b.value.shape() => b.value = t.clone(),
                _ => missing.push(b.name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Format(format!(
                "{}: missing or mis-shaped tensors {missing:?}",
                path.display()
            )));
        }
        Ok(Self { model, meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::backbone::ModelScale;

    #[test]
    fn naming_scheme() {
        assert_eq!(
            checkpoint_name(TaskId::Referable, Domain::Frequency, Architecture::ResidualCnn, 42),
            "task2_frequency_residual_cnn_42.uwfckpt"
        );
    }

    #[test]
    fn save_load_roundtrip_preserves_predictions() {
        let spec = BackboneSpec::new(Architecture::LightweightCnn, ModelScale::Compact, 32);
        let model = Classifier::<f32>::build(&spec, Domain::Rgb, None, 3).unwrap();
        let meta = CheckpointMeta {
            kind: "classifier".into(),
            task: TaskId::Quality,
            domain: Domain::Rgb,
            spec: spec.clone(),
            vit: model.backbone.vit,
            feature_dim: model.feature_dim(),
            feature_layer: "pooled".into(),
            explain_layer: model.backbone.explain_layer.clone(),
            pretrained_loaded: false,
            seed: 3,
            split_seed: 42,
            train_config: TrainConfig::default(),
            stages: vec![],
            histories: vec![],
            run_config: Value::Null,
        };
        let tm = TrainedModel { model, meta };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.uwfckpt");
        tm.save(&p).unwrap();
        let back = TrainedModel::<f32>::load(&p).unwrap();
        assert_eq!(back.meta, tm.meta);
        let x = Tensor::full(&[2, 3, 32, 32], 0.25f32);
        assert_eq!(back.model.probabilities(&x), tm.model.probabilities(&x));
        assert_eq!(tm.id(), "task1_rgb_lightweight_cnn_3");
    }
}
