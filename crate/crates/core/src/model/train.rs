use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::classifier::{image_batch, Classifier};
use super::cutmix::cutmix;
use super::loss::{cross_entropy, cross_entropy_grad, one_hot, softmax};
use super::optim::{AdamW, AdamWConfig};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{auroc, ScoredSet};
use crate::nn::{Ctx, Layer};
use crate::nn::{Param, Sequential};
use crate::rng::{rng_for, Rng};
use crate::scalar::Scalar;
use crate::spatial::{AugmentDraw, AugmentPolicy};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    HeadOnly,
    Finetune,
    FoundationAdapt,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::HeadOnly => "head_only",
            Stage::Finetune => "finetune",
            Stage::FoundationAdapt => "foundation_adapt",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub cutmix_alpha: f64,
    /// CutMix outside the foundation stage.
    pub cutmix_all: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            learning_rate: a.learning_rate,
            weight_decay: a.weight_decay,
            batch_size: 16,
            max_epochs: 100,
            early_stop_patience: 10,
            cutmix_alpha: 1.0,
            cutmix_all: false,
            adam_beta1: a.beta1,
            adam_beta2: a.beta2,
            adam_eps: a.eps,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be at least 1".into());
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1".into());
        }
        if !(self.cutmix_alpha > 0.0) {
            return bad("cutmix_alpha must be positive".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn uses_cutmix(&self, stage: Stage) -> bool {
        stage == Stage::FoundationAdapt || self.cutmix_all
    }
}

/// Preprocessed images with binary labels.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub ids: Vec<String>,
    pub images: Vec<Image<T>>,
    pub labels: Vec<u8>,
    pub domain: Domain,
    /// Random geometric augmentation applied per draw during training.
    pub augment: Option<AugmentPolicy>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(ids: Vec<String>, images: Vec<Image<T>>, labels: Vec<u8>, domain: Domain) -> Self {
        assert_eq!(ids.len(), images.len());
        assert_eq!(ids.len(), labels.len());
        Self {
            ids,
            images,
            labels,
            domain,
            augment: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn has_both_classes(&self) -> bool {
        self.labels.contains(&0) && self.labels.contains(&1)
    }
}

/// Monitors a maximized metric. Only strict improvements count.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1);
        Self {
            patience,
            best: None,
            epoch: 0,
        }
    }

    /// Record the next epoch's value; true when it is the new best.
    pub fn update(&mut self, value: f64) -> bool {
        self.epoch += 1;
        let improved = match self.best {
            None => true,
            Some((_, b)) => value > b,
        };
        if improved {
            self.best = Some((self.epoch, value));
        }
        improved
    }

    /// 1-based best epoch.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|b| b.0)
    }

    pub fn best_value(&self) -> Option<f64> {
        self.best.map(|b| b.1)
    }

    pub fn should_stop(&self) -> bool {
        self.best.is_some_and(|(b, _)| self.epoch - b >= self.patience)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub stage: Option<Stage>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
    pub stopped_early: bool,
}

/// Set the trainable flags a stage calls for.
pub fn configure_stage<T: Scalar>(model: &mut Classifier<T>, stage: Stage, unfreeze_fraction: f64) {
    match stage {
        Stage::HeadOnly => model.freeze_backbone(),
        Stage::Finetune => {
            model.unfreeze_deepest(unfreeze_fraction);
        }
        Stage::FoundationAdapt => model.unfreeze_all(),
    }
}

pub fn validation_auroc<T: Scalar>(model: &Classifier<T>, val: &Dataset<T>, batch_size: usize) -> Result<f64> {
    let scores = model.predict_proba(&val.images, val.domain, batch_size)?;
    auroc(&ScoredSet::from_scores(scores, val.labels.clone())?)
}

/// Run one training stage with early stopping on validation AUROC. On
/// return the model holds the best epoch's weights.
pub fn train_stage<T: Scalar>(
    model: &mut Classifier<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    config: &TrainConfig,
    stage: Stage,
    seed: u64,
) -> Result<History> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if !val.has_both_classes() {
        return Err(Error::SingleClassValidation);
    }
    model.check_domain(train.domain)?;
    model.check_domain(val.domain)?;
    let fraction = model.spec.unfreeze_fraction;
    configure_stage(model, stage, fraction);

    let arch = model.spec.architecture.as_str();
    let mut rng = rng_for(seed, &["train", arch, stage.as_str()]);
    let mut opt = AdamW::new(config.adamw());
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut best_state = model.state();
    let mut history = History {
        stage: Some(stage),
        ..History::default()
    };
    let use_cutmix = config.uses_cutmix(stage);
    let mut order: Vec<usize> = (0..train.len()).collect();

    // A frozen backbone without augmentation yields fixed features, so only
    // the head needs training.
    let frozen = !model.backbone.stages.layers.iter().any(|l| l.any_trainable());
    if frozen && train.augment.is_none() && !use_cutmix {
        let tx = model.extract_features(&train.images, train.domain, config.batch_size)?;
        let vx = model.extract_features(&val.images, val.domain, config.batch_size)?;
        return train_head(&mut model.head, &tx, &train.labels, &vx, &val.labels, config, Some(stage), &mut rng);
    }

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 && train.len() >= 2 {
                // batch statistics need two samples
                continue;
            }
            let mut labels: Tensor<T> = one_hot(&batch.iter().map(|&i| train.labels[i]).collect::<Vec<_>>());
            let probs = {
                let imgs: Vec<Image<T>> = batch
                    .iter()
                    .map(|&i| match &train.augment {
                        Some(policy) => AugmentDraw::sample(policy, &mut rng).apply(&train.images[i]),
                        None => train.images[i].clone(),
                    })
                    .collect();
                let mut x = image_batch(&imgs);
                if use_cutmix && batch.len() >= 2 {
                    let mixed = cutmix(&x, &labels, config.cutmix_alpha, &mut rng);
                    x = mixed.images;
                    labels = mixed.labels;
                }
                let mut ctx = Ctx {
                    training: true,
                    rng: &mut rng,
                };
                let logits = model.forward_train(&x, &mut ctx);
                let probs = softmax(&logits);
                let g = cross_entropy_grad(&probs, &labels);
                model.backward(&g);
                probs
            };
            let loss = cross_entropy(&probs, &labels).as_f64();
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            opt.step(model.params_mut());
            model.zero_grad();
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        model.clear_cache();
        let val_auroc = validation_auroc(model, val, config.batch_size)?;
        let train_loss = loss_sum / seen.max(1) as f64;
        log::debug!("{arch} {stage} epoch {epoch}: loss {train_loss:.4} val AUROC {val_auroc:.4}");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_auroc,
        });
        if stopper.update(val_auroc) {
            best_state = model.state();
        }
        if stopper.should_stop() {
            history.stopped_early = true;
            break;
        }
    }
    model.restore(&best_state);
    history.best_epoch = stopper.best_epoch().unwrap_or(0);
    history.best_val_auroc = stopper.best_value().unwrap_or(f64::NAN);
    Ok(history)
}

fn head_state<T: Scalar>(head: &Sequential<T>) -> Vec<Tensor<T>> {
    head.params().iter().map(|p| p.value.clone()).collect()
}

/// Train a head on fixed feature rows under the same optimizer, loss and
/// early-stopping rules as [`train_stage`]. On return `head` holds the best
/// epoch's weights.
#[allow(clippy::too_many_arguments)]
pub fn train_head<T: Scalar>(
    head: &mut Sequential<T>,
    train_x: &Tensor<T>,
    train_y: &[u8],
    val_x: &Tensor<T>,
    val_y: &[u8],
    config: &TrainConfig,
    stage: Option<Stage>,
    rng: &mut Rng,
) -> Result<History> {
    config.validate()?;
    let n = train_y.len();
    if n == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    if train_x.dim(0) != n || val_x.dim(0) != val_y.len() {
        return Err(Error::Data("feature rows and labels differ in length".into()));
    }
    if !(val_y.contains(&0) && val_y.contains(&1)) {
        return Err(Error::SingleClassValidation);
    }
    for p in head.params_mut() {
        p.trainable = true;
    }
    let mut opt = AdamW::new(config.adamw());
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut best = head_state(head);
    let mut history = History {
        stage,
        ..History::default()
    };
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 && n >= 2 {
                continue;
            }
            let labels: Tensor<T> = one_hot(&batch.iter().map(|&i| train_y[i]).collect::<Vec<_>>());
            let mut ctx = Ctx { training: true, rng };
            let probs = softmax(&head.forward_train(&train_x.gather_rows(batch), &mut ctx));
            head.backward(&cross_entropy_grad(&probs, &labels));
            let loss = cross_entropy(&probs, &labels).as_f64();
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            opt.step(head.params_mut());
            head.params_mut().into_iter().for_each(Param::zero_grad);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        head.clear_cache();
        let scores: Vec<T> = softmax(&head.forward(val_x)).data().chunks_exact(2).map(|r| r[1]).collect();
        let val_auroc = auroc(&ScoredSet::from_scores(scores, val_y.to_vec())?)?;
        let train_loss = loss_sum / seen.max(1) as f64;
        log::debug!("head epoch {epoch}: loss {train_loss:.4} val AUROC {val_auroc:.4}");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_auroc,
        });
        if stopper.update(val_auroc) {
            best = head_state(head);
        }
        if stopper.should_stop() {
            history.stopped_early = true;
            break;
        }
    }
    for (p, v) in head.params_mut().into_iter().zip(best) {
        p.value = v;
    }
    history.best_epoch = stopper.best_epoch().unwrap_or(0);
    history.best_val_auroc = stopper.best_value().unwrap_or(f64::NAN);
    Ok(history)
}
