//! Feature-level fusion: pooled embeddings from several models of one
//! domain are standardized with training statistics, concatenated and fed
//! to an MLP head.
//!
//! Feature matrices are stored in a small columnar file (integers
//! little-endian):
//!
//! | bytes     | content                                         |
//! |-----------|-------------------------------------------------|
//! | 8         | magic `UWFFEAT1`                                |
//! | 4         | format version (u32)                            |
//! | 8         | rows (u64)                                      |
//! | 8         | cols (u64)                                      |
//! | ...       | domain, source, layer: u32 length + UTF-8 bytes |
//! | ...       | `rows` image ids, each u32 length + UTF-8 bytes |
//! | 8·rows·cols | f64 values, row-major                         |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::archive;
use crate::data::TaskId;
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{mlp_head, train_head, History, TrainConfig, TrainedModel};
use crate::model::softmax;
use crate::nn::{Layer, Sequential};
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"UWFFEAT1";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_EXT: &str = "uwffeat";
pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Name of the extraction point recorded in feature metadata.
pub const POOLED_LAYER: &str = "pooled";

/// Embedding rows, one per image, from a single source.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T> {
    pub ids: Vec<String>,
    /// `[rows, cols]`
    pub values: Tensor<T>,
    /// Checkpoint id, or a `+`-joined list after concatenation.
    pub source: String,
    pub domain: Domain,
    pub layer: String,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(ids: Vec<String>, values: Tensor<T>, source: impl Into<String>, domain: Domain, layer: impl Into<String>) -> Result<Self> {
        if values.ndim() != 2 || values.dim(0) != ids.len() {
            return Err(Error::Data(format!(
                "feature matrix of shape {:?} does not match {} ids",
                values.shape(),
                ids.len()
            )));
        }
        if !values.all_finite() {
            return Err(Error::Data("feature matrix contains non-finite values".into()));
        }
        Ok(Self {
            ids,
            values,
            source: source.into(),
            domain,
            layer: layer.into(),
        })
    }

    /// Pooled pre-head embeddings of preprocessed `images`.
    pub fn extract(model: &TrainedModel<T>, ids: &[String], images: &[Image<T>], domain: Domain, batch_size: usize) -> Result<Self> {
        let values = model.model.extract_features(images, domain, batch_size)?;
        Self::new(ids.to_vec(), values, model.id(), domain, POOLED_LAYER)
    }

    pub fn rows(&self) -> usize {
        self.values.dim(0)
    }

    pub fn cols(&self) -> usize {
        self.values.dim(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.values.row(i)
    }

    /// Columns `start..end` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.rows() * (end - start));
        for i in 0..self.rows() {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Tensor::from_vec(&[self.rows(), end - start], data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut b = Vec::with_capacity(64 + self.values.len() * 8);
        b.extend_from_slice(FEATURE_MAGIC);
        b.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.rows() as u64).to_le_bytes());
        b.extend_from_slice(&(self.cols() as u64).to_le_bytes());
        for s in [self.domain.as_str(), &self.source, &self.layer] {
            put_str(&mut b, s);
        }
        for id in &self.ids {
            put_str(&mut b, id);
        }
        for v in self.values.data() {
            b.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, b)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path)?;
        let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated"))? != FEATURE_MAGIC {
            return Err(bad("not a feature matrix"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated"))?;
        if version != FEATURE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let rows = r.u64().ok_or_else(|| bad("truncated"))? as usize;
        let cols = r.u64().ok_or_else(|| bad("truncated"))? as usize;
        let mut strings = Vec::with_capacity(3 + rows);
        for _ in 0..3 + rows {
            strings.push(r.string().ok_or_else(|| bad("truncated header"))?);
        }
        let domain: Domain = strings[0].parse().map_err(|_| bad("unknown domain"))?;
        let payload = r.take(rows * cols * 8).ok_or_else(|| bad("truncated payload"))?;
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let ids = strings.split_off(3);
        Self::new(ids, Tensor::from_vec(&[rows, cols], data), strings[1].clone(), domain, strings[2].clone())
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

/// Per-column training statistics. Standard deviations use the population
/// convention (divide by N).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizerStats {
    pub source: String,
    pub rows: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub epsilon: f64,
    /// Columns whose std fell below `epsilon` and was replaced by it.
    pub degenerate: Vec<usize>,
    pub convention: String,
}

pub fn fit_standardizer<T: Scalar>(train: &FeatureMatrix<T>, epsilon: f64) -> Result<StandardizerStats> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("standardizer epsilon must be positive, got {epsilon}")));
    }
    let (n, d) = (train.rows(), train.cols());
    if n < 2 {
        return Err(Error::Data(format!("standardizer needs at least 2 rows, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(train.row(i)) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, m), v) in var.iter_mut().zip(&mean).zip(train.row(i)) {
            *s += (v.as_f64() - m).powi(2);
        }
    }
    let mut degenerate = Vec::new();
    let std = var
        .into_iter()
        .enumerate()
        .map(|(j, s)| {
            let sd = (s / n as f64).sqrt();
            if sd < epsilon {
                degenerate.push(j);
                epsilon
            } else {
                sd
            }
        })
        .collect();
    Ok(StandardizerStats {
        source: train.source.clone(),
        rows: n,
        mean,
        std,
        epsilon,
        degenerate,
        convention: "population".into(),
    })
}

impl StandardizerStats {
    pub fn apply<T: Scalar>(&self, m: &FeatureMatrix<T>) -> Result<FeatureMatrix<T>> {
        if m.cols() != self.mean.len() {
            return Err(Error::Data(format!(
                "standardizer for `{}` expects {} columns, got {}",
                self.source,
                self.mean.len(),
                m.cols()
            )));
        }
        if m.source != self.source {
            return Err(Error::Data(format!(
                "standardizer fitted on `{}` applied to `{}`",
                self.source, m.source
            )));
        }
        let mut values = m.values.clone();
        for row in values.data_mut().chunks_exact_mut(self.mean.len()) {
            for ((v, mu), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = T::lit((v.as_f64() - mu) / sd);
            }
        }
        FeatureMatrix::new(m.ids.clone(), values, m.source.clone(), m.domain, m.layer.clone())
    }
}

/// Standardize each matrix with its stats and join the columns in order.
pub fn concat_standardized<T: Scalar>(matrices: &[FeatureMatrix<T>], stats: &[StandardizerStats]) -> Result<FeatureMatrix<T>> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
    if matrices.len() != stats.len() {
        return Err(Error::Data(format!(
            "{} feature matrices but {} standardizers",
            matrices.len(),
            stats.len()
        )));
    }
    for m in &matrices[1..] {
        if m.domain != first.domain {
            return Err(Error::DomainMismatch {
                expected: first.domain.to_string(),
                found: m.domain.to_string(),
            });
        }
        if m.rows() != first.rows() {
            return Err(Error::Data(format!(
                "`{}` has {} rows, `{}` has {}",
                first.source,
                first.rows(),
                m.source,
                m.rows()
            )));
        }
        if let Some(index) = (0..m.rows()).find(|&i| m.ids[i] != first.ids[i]) {
            return Err(Error::RowOrder {
                index,
                expected: first.ids[index].clone(),
                found: m.ids[index].clone(),
            });
        }
    }
    let parts = matrices
        .iter()
        .zip(stats)
        .map(|(m, s)| s.apply(m))
        .collect::<Result<Vec<_>>>()?;
    let width: usize = parts.iter().map(FeatureMatrix::cols).sum();
    let mut data = Vec::with_capacity(first.rows() * width);
    for i in 0..first.rows() {
        for p in &parts {
            data.extend_from_slice(p.row(i));
        }
    }
    let source = matrices.iter().map(|m| m.source.as_str()).collect::<Vec<_>>().join("+");
    FeatureMatrix::new(
        first.ids.clone(),
        Tensor::from_vec(&[first.rows(), width], data),
        source,
        first.domain,
        "concat",
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSource {
    pub checkpoint: String,
    pub stats: StandardizerStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionMeta {
    pub kind: String,
    pub task: TaskId,
    pub domain: Domain,
    pub sources: Vec<FusionSource>,
    pub input_dim: usize,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub history: History,
    pub run_config: Value,
}

/// MLP over the standardized concatenation of fixed source models.
#[derive(Clone)]
pub struct FusionModel<T: Scalar> {
    pub meta: FusionMeta,
    pub head: Sequential<T>,
}

pub fn fusion_name(task: TaskId, domain: Domain, seed: u64) -> String {
    format!("{task}_{domain}_fusion_{seed}")
}

/// Train the fusion head on concatenated standardized features.
#[allow(clippy::too_many_arguments)]
pub fn train_fusion_head<T: Scalar>(
    task: TaskId,
    sources: Vec<FusionSource>,
    features: &FeatureMatrix<T>,
    labels: &[u8],
    val_features: &FeatureMatrix<T>,
    val_labels: &[u8],
    config: &TrainConfig,
    seed: u64,
) -> Result<FusionModel<T>> {
    if val_features.domain != features.domain {
        return Err(Error::DomainMismatch {
            expected: features.domain.to_string(),
            found: val_features.domain.to_string(),
        });
    }
    if val_features.cols() != features.cols() {
        return Err(Error::Data("training and validation features differ in width".into()));
    }
    let width: usize = sources.iter().map(|s| s.stats.mean.len()).sum();
    if width != features.cols() {
        return Err(Error::Data(format!(
            "sources describe {width} columns, features have {}",
            features.cols()
        )));
    }
    let mut init = rng_for(seed, &["init", "fusion", "head"]);
    let mut head = mlp_head("fusion", features.cols(), &mut init);
    let mut rng = rng_for(seed, &["train", "fusion"]);
    let history = train_head(
        &mut head,
        &features.values,
        labels,
        &val_features.values,
        val_labels,
        config,
        None,
        &mut rng,
    )?;
    Ok(FusionModel {
        meta: FusionMeta {
            kind: "fusion".into(),
            task,
            domain: features.domain,
            sources,
            input_dim: features.cols(),
            seed,
            train_config: config.clone(),
            history,
            run_config: Value::Null,
        },
        head,
    })
}

impl<T: Scalar> FusionModel<T> {
    pub fn id(&self) -> String {
        fusion_name(self.meta.task, self.meta.domain, self.meta.seed)
    }

    pub fn source_ids(&self) -> Vec<&str> {
        self.meta.sources.iter().map(|s| s.checkpoint.as_str()).collect()
    }

    pub fn stats(&self) -> Vec<StandardizerStats> {
        self.meta.sources.iter().map(|s| s.stats.clone()).collect()
    }

    /// Positive-class probability from an already concatenated matrix.
    pub fn predict_concatenated(&self, features: &FeatureMatrix<T>) -> Result<Vec<T>> {
        if features.domain != self.meta.domain {
            return Err(Error::DomainMismatch {
                expected: self.meta.domain.to_string(),
                found: features.domain.to_string(),
            });
        }
        if features.cols() != self.meta.input_dim {
            return Err(Error::Data(format!(
                "fusion head expects {} columns, got {}",
                self.meta.input_dim,
                features.cols()
            )));
        }
        if features.rows() == 0 {
            return Ok(Vec::new());
        }
        let p = softmax(&self.head.forward(&features.values));
        Ok(p.data().chunks_exact(2).map(|r| r[1]).collect())
    }

    /// Offline path: raw per-source feature matrices in source order.
    pub fn predict_features(&self, matrices: &[FeatureMatrix<T>]) -> Result<Vec<T>> {
        let found: Vec<&str> = matrices.iter().map(|m| m.source.as_str()).collect();
        if found != self.source_ids() {
            return Err(Error::Data(format!(
                "fusion expects sources {:?} in order, got {found:?}",
                self.source_ids()
            )));
        }
        self.predict_concatenated(&concat_standardized(matrices, &self.stats())?)
    }

    /// Full path from preprocessed images through every source model.
    pub fn predict(
        &self,
        models: &[TrainedModel<T>],
        ids: &[String],
        images: &[Image<T>],
        domain: Domain,
        batch_size: usize,
    ) -> Result<Vec<T>> {
        if domain != self.meta.domain {
            return Err(Error::DomainMismatch {
                expected: self.meta.domain.to_string(),
                found: domain.to_string(),
            });
        }
        let matrices = models
            .iter()
            .map(|m| FeatureMatrix::extract(m, ids, images, domain, batch_size))
            .collect::<Result<Vec<_>>>()?;
        self.predict_features(&matrices)
    }

    /// Load every source checkpoint from `dir`, in recorded order.
    pub fn load_sources(&self, dir: &Path) -> Result<Vec<TrainedModel<T>>> {
        let paths: Vec<PathBuf> = self
            .meta
            .sources
            .iter()
            .map(|s| dir.join(format!("{}.{}", s.checkpoint, crate::model::checkpoint::CHECKPOINT_EXT)))
            .collect();
        let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::MissingCheckpoints(missing));
        }
        let models = paths.iter().map(|p| TrainedModel::load(p)).collect::<Result<Vec<_>>>()?;
        for m in &models {
            if m.meta.domain != self.meta.domain {
                return Err(Error::DomainMismatch {
                    expected: self.meta.domain.to_string(),
                    found: m.meta.domain.to_string(),
                });
            }
        }
        Ok(models)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, &Tensor<T>)> = self.head.params().into_iter().map(|p| (p.name.clone(), &p.value)).collect();
        archive::write(path, &serde_json::to_value(&self.meta)?, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ar = archive::read::<T>(path)?;
        let meta: FusionMeta = serde_json::from_value(ar.meta)
            .map_err(|e| Error::Format(format!("{}: fusion metadata: {e}", path.display())))?;
        if meta.kind != "fusion" {
            return Err(Error::Format(format!("{}: not a fusion checkpoint", path.display())));
        }
        let mut rng = rng_for(0, &["skeleton"]);
        let mut head = mlp_head("fusion", meta.input_dim, &mut rng);
        for p in head.params_mut() {
            match ar.tensors.get(&p.name) {
                Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
                _ => return Err(Error::Format(format!("{}: missing tensor `{}`", path.display(), p.name))),
            }
        }
        Ok(Self { meta, head })
    }
}
