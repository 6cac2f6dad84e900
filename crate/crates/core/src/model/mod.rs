//! Backbone + head classifiers and their training protocols.

pub mod backbone;
pub mod checkpoint;
pub mod classifier;
pub mod cutmix;
pub mod loss;
pub mod optim;
pub mod train;

pub use backbone::{Architecture, Backbone, BackboneSpec, ModelScale, PretrainedSource, VitConfig};
pub use checkpoint::{checkpoint_name, CheckpointMeta, TrainedModel};
pub use classifier::{image_batch, mlp_head, Classifier};
pub use cutmix::{cutmix, cutmix_box, cutmix_with_lambda, CutBox, CutMixed};
pub use loss::{cross_entropy, cross_entropy_grad, one_hot, softmax};
pub use optim::{AdamW, AdamWConfig};
pub use train::{configure_stage, train_head, train_stage, validation_auroc, Dataset, EarlyStopping, EpochRecord, History, Stage, TrainConfig};
