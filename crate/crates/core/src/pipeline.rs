//! Config-driven commands: split, train, fuse, evaluate, explain, synth.
//!
//! Every command writes `effective_config.toml` into the run directory, and
//! every checkpoint embeds the same snapshot. Commands skip work whose
//! outputs already exist unless `force` is set.
//!
//! Run directory layout:
//!
//! ```text
//! effective_config.toml
//! splits.csv
//! checkpoints/{task}_{domain}_{arch}_{seed}.uwfckpt
//! checkpoints/{task}_{domain}_{arch}_{seed}.stage1.uwfckpt
//! checkpoints/{task}_{domain}_fusion_{seed}.uwfckpt
//! histories/{checkpoint id}.json
//! features/{checkpoint id}_{split}.uwffeat
//! predictions/{checkpoint id}.csv
//! eval/report.{csv,txt,json}
//! explain/report.html, explain/panels/*.{png,json}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{load_manifest, read_splits, stratified_split, write_splits, ImageRecord, Split, TaskId, DEFAULT_RATIOS};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::explain::{explain, overlay, panel, probability, write_html_report, HeatmapSummary, ReportEntry, DEFAULT_ALPHA};
use crate::frequency::{normalized_spectrum, FrequencyConfig};
use crate::fusion::{concat_standardized, fit_standardizer, fusion_name, train_fusion_head, FeatureMatrix, FusionModel, FusionSource, DEFAULT_EPSILON, FEATURE_EXT};
use crate::image::Image;
use crate::metrics::{evaluate_run, EvalReport, RowKey, ScoredSet, ThresholdRule};
use crate::model::checkpoint::CHECKPOINT_EXT;
use crate::model::{checkpoint_name, train_stage, Architecture, BackboneSpec, CheckpointMeta, Classifier, Dataset, ModelScale, Stage, TrainConfig, TrainedModel};
use crate::spatial::{crop_or_pad, spatial_stages, SpatialConfig};
use crate::synth::{make_synthetic_dataset, write_compact_encoder, SynthConfig};
use crate::Real;

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";
pub const SPLITS_FILE: &str = "splits.csv";
/// Input side used when neither the config nor the task fixes one.
pub const NATIVE_INPUT: usize = 224;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scale: ModelScale,
    /// Square input side. Defaults to the task's resolution, else 224.
    pub input_size: Option<usize>,
    pub unfreeze_fraction: f64,
    pub foundation_checkpoint: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scale: ModelScale::Reference,
            input_size: None,
            unfreeze_fraction: 0.25,
            foundation_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: DEFAULT_RATIOS,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub enabled: bool,
    pub epsilon: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub threshold: ThresholdRule,
    pub split: Split,
    /// Further run directories whose predictions join the report.
    pub runs: Vec<PathBuf>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            threshold: ThresholdRule::default(),
            split: Split::Test,
            runs: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Empty means every configured architecture.
    pub architectures: Vec<Architecture>,
    /// Empty means the first `max_images` of `split`.
    pub image_ids: Vec<String>,
    pub split: Split,
    pub max_images: usize,
    pub target_class: usize,
    pub alpha: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            architectures: Vec::new(),
            image_ids: Vec::new(),
            split: Split::Test,
            max_images: 8,
            target_class: 1,
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebugConfig {
    /// Write crop/resize/normalize PNGs under `stages/`.
    pub dump_stages: bool,
    /// Write normalized spectra under `spectra/`.
    pub dump_spectrum: bool,
}

fn default_architectures() -> Vec<Architecture> {
    Architecture::ALL.to_vec()
}

fn default_seed() -> u64 {
    crate::data::DEFAULT_SEED
}

fn default_true() -> bool {
    true
}

/// Everything one run needs. Relative paths resolve against the working
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub task: TaskId,
    pub domain: Domain,
    pub output_dir: PathBuf,
    #[serde(default = "default_architectures")]
    pub architectures: Vec<Architecture>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Random flips/rotations/zoom on RGB training images.
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub spatial: SpatialConfig,
    #[serde(default)]
    pub frequency: FrequencyConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
    #[serde(default)]
    pub debug: DebugConfig,
}

/// Parse a CLI override value as a TOML literal, falling back to a string.
fn override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Set `dotted.key = raw` inside `table`, creating sections as needed.
pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), override_value(raw));
    Ok(())
}

impl RunConfig {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_table(text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?)
    }

    /// Read `path` and apply `key=value` overrides before validation.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut table: toml::Table = fs::read_to_string(path)?
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.spatial.validate()?;
        if self.architectures.is_empty() {
            return Err(Error::Config("at least one architecture is required".into()));
        }
        let unique: BTreeSet<_> = self.architectures.iter().collect();
        if unique.len() != self.architectures.len() {
            return Err(Error::Config("architectures must not repeat".into()));
        }
        for &arch in &self.architectures {
            self.backbone_spec(arch).validate()?;
        }
        if !(self.frequency.clip_percentile > 0.0 && self.frequency.clip_percentile <= 1.0) {
            return Err(Error::Config("clip_percentile must be in (0, 1]".into()));
        }
        if !(self.fusion.epsilon > 0.0) {
            return Err(Error::Config("fusion epsilon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.explain.alpha) || self.explain.target_class > 1 {
            return Err(Error::Config("explain alpha must be in [0, 1] and target_class 0 or 1".into()));
        }
        let r = self.split.ratios;
        if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 || r.iter().any(|v| *v < 0.0) {
            return Err(Error::Config(format!("split ratios must be non-negative and sum to 1, got {r:?}")));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.model
            .input_size
            .or(self.task.definition().input_resolution)
            .unwrap_or(NATIVE_INPUT)
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or(self.seed)
    }

    pub fn backbone_spec(&self, arch: Architecture) -> BackboneSpec {
        let mut spec = BackboneSpec::new(arch, self.model.scale, self.input_size());
        spec.unfreeze_fraction = self.model.unfreeze_fraction;
        if arch == Architecture::RetinalFoundation {
            spec.foundation_checkpoint = self.model.foundation_checkpoint.clone();
        }
        spec
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn snapshot(&self) -> Result<Value> {
        Ok(serde_json::to_value(self)?)
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.output_dir.clone(),
            task: self.task,
            domain: self.domain,
            seed: self.seed,
        }
    }

    /// Model ids expected in this run's report.
    pub fn report_models(&self) -> Vec<String> {
        let mut v: Vec<String> = self.architectures.iter().map(|a| a.as_str().to_string()).collect();
        if self.fusion.enabled {
            v.push("fusion".into());
        }
        v
    }
}

/// Paths inside one run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
    pub task: TaskId,
    pub domain: Domain,
    pub seed: u64,
}

impl Layout {
    pub fn effective_config(&self) -> PathBuf {
        self.root.join(EFFECTIVE_CONFIG)
    }

    pub fn splits(&self) -> PathBuf {
        self.root.join(SPLITS_FILE)
    }

    pub fn model_id(&self, arch: Architecture) -> String {
        checkpoint_name(self.task, self.domain, arch, self.seed)
            .trim_end_matches(&format!(".{CHECKPOINT_EXT}"))
            .to_string()
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, arch: Architecture) -> PathBuf {
        self.checkpoint_dir().join(checkpoint_name(self.task, self.domain, arch, self.seed))
    }

    pub fn stage1_checkpoint(&self, arch: Architecture) -> PathBuf {
        self.checkpoint_dir().join(format!("{}.stage1.{CHECKPOINT_EXT}", self.model_id(arch)))
    }

    pub fn fusion_id(&self) -> String {
        fusion_name(self.task, self.domain, self.seed)
    }

    pub fn fusion(&self) -> PathBuf {
        self.checkpoint_dir().join(format!("{}.{CHECKPOINT_EXT}", self.fusion_id()))
    }

    pub fn history(&self, id: &str) -> PathBuf {
        self.root.join("histories").join(format!("{id}.json"))
    }

    pub fn features(&self, id: &str, split: Split) -> PathBuf {
        self.root.join("features").join(format!("{id}_{split}.{FEATURE_EXT}"))
    }

    pub fn predictions(&self, id: &str) -> PathBuf {
        self.root.join("predictions").join(format!("{id}.csv"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn explain_dir(&self) -> PathBuf {
        self.root.join("explain")
    }
}

/// Per-invocation settings that are not part of the run config.
#[derive(Clone, Debug, Default)]
pub struct Context {
    pub force: bool,
    /// Directory searched for pretrained backbone archives.
    pub cache_dir: Option<PathBuf>,
}

fn write_effective(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.layout().effective_config(), cfg.to_toml()?)?;
    Ok(())
}

fn manifest_records(cfg: &RunConfig) -> Result<Vec<ImageRecord>> {
    Ok(load_manifest(&cfg.manifest)?
        .into_iter()
        .filter(|r| r.participates(cfg.task))
        .collect())
}

/// Stratified split of the configured task, written to `splits.csv`.
pub fn cmd_split(cfg: &RunConfig, ctx: &Context) -> Result<PathBuf> {
    write_effective(cfg)?;
    let path = cfg.layout().splits();
    if path.exists() && !ctx.force {
        log::info!("{} exists; skipping split", path.display());
        return Ok(path);
    }
    let records = manifest_records(cfg)?;
    if records.is_empty() {
        return Err(Error::Data(format!("manifest has no records labeled for {}", cfg.task)));
    }
    let split = stratified_split(&records, cfg.split.ratios, cfg.split_seed(), cfg.task)?;
    write_splits(&path, &[split])?;
    Ok(path)
}

/// Images of one split, preprocessed for the run's domain and ordered by id.
#[derive(Clone)]
pub struct SplitImages {
    pub records: Vec<ImageRecord>,
    pub data: Dataset<Real>,
}

/// Model input for `raw`, plus the image an explanation is drawn over: the
/// crop for RGB, the normalized spectrum for frequency input.
pub fn prepare(cfg: &RunConfig, raw: &Image<Real>, id: &str) -> Result<(Image<Real>, Image<Real>)> {
    let size = cfg.input_size();
    match cfg.domain {
        Domain::Rgb => {
            let st = spatial_stages(raw, &cfg.spatial, size)?;
            if cfg.debug.dump_stages {
                let dir = cfg.output_dir.join("stages");
                st.cropped.save_png(&dir.join(format!("{id}_1_cropped.png")))?;
                st.resized.save_png(&dir.join(format!("{id}_2_resized.png")))?;
                st.normalized.save_png(&dir.join(format!("{id}_3_normalized.png")))?;
            }
            Ok((st.normalized, st.cropped))
        }
        Domain::Frequency => {
            let cropped = crop_or_pad(raw, cfg.spatial.crop_size, cfg.spatial.pad_small)?;
            let spectrum = normalized_spectrum(&cropped, &cfg.frequency, id)?.to_image();
            if cfg.debug.dump_spectrum {
                spectrum.save_png(&cfg.output_dir.join("spectra").join(format!("{id}.png")))?;
            }
            let input = spectrum.resize(size, size).clamp01().replicate(3);
            Ok((input, spectrum.replicate(3)))
        }
    }
}

fn manifest_base(cfg: &RunConfig) -> PathBuf {
    cfg.manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Records of the configured task with their split filled in, by id.
pub fn assigned_records(cfg: &RunConfig) -> Result<Vec<ImageRecord>> {
    let splits = read_splits(&cfg.layout().splits())?;
    let assignment = splits
        .get(&cfg.task)
        .ok_or_else(|| Error::Data(format!("split file has no rows for {}", cfg.task)))?;
    let mut records: Vec<ImageRecord> = manifest_records(cfg)?
        .into_iter()
        .filter_map(|mut r| {
            assignment.get(&r.image_id).map(|&s| {
                r.split = Some(s);
                r
            })
        })
        .collect();
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    if records.len() != assignment.len() {
        return Err(Error::Data(format!(
            "split file assigns {} images but the manifest matches {}",
            assignment.len(),
            records.len()
        )));
    }
    Ok(records)
}

fn load_images(cfg: &RunConfig, records: Vec<ImageRecord>) -> Result<SplitImages> {
    let base = manifest_base(cfg);
    let mut images = Vec::with_capacity(records.len());
    for r in &records {
        let raw = Image::<Real>::load(&r.resolved_path(&base))?;
        images.push(prepare(cfg, &raw, &r.image_id)?.0);
    }
    let ids = records.iter().map(|r| r.image_id.clone()).collect();
    let labels = records
        .iter()
        .map(|r| r.label(cfg.task).expect("filtered by task"))
        .collect();
    Ok(SplitImages {
        data: Dataset::new(ids, images, labels, cfg.domain),
        records,
    })
}

/// Preprocessed train/val/test sets. Training images of the RGB domain
/// carry the augmentation policy when `augment` is on.
pub fn load_splits(cfg: &RunConfig) -> Result<BTreeMap<Split, SplitImages>> {
    let records = assigned_records(cfg)?;
    let mut out = BTreeMap::new();
    for split in Split::ALL {
        let rs: Vec<ImageRecord> = records.iter().filter(|r| r.split == Some(split)).cloned().collect();
        let mut set = load_images(cfg, rs)?;
        if split == Split::Train && cfg.augment && cfg.domain == Domain::Rgb {
            set.data.augment = Some(cfg.spatial.augmentation.clone());
        }
        out.insert(split, set);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub image_id: String,
    pub split: Split,
    pub label: u8,
    pub score: f64,
    pub task: TaskId,
    pub domain: Domain,
    pub model: String,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

fn prediction_rows(cfg: &RunConfig, model: &str, split: Split, set: &SplitImages, scores: &[Real]) -> Vec<PredictionRow> {
    set.data
        .ids
        .iter()
        .zip(&set.data.labels)
        .zip(scores)
        .map(|((id, &label), &score)| PredictionRow {
            image_id: id.clone(),
            split,
            label,
            score: score as f64,
            task: cfg.task,
            domain: cfg.domain,
            model: model.to_string(),
        })
        .collect()
}

fn stages_for(arch: Architecture) -> &'static [Stage] {
    if arch == Architecture::RetinalFoundation {
        &[Stage::FoundationAdapt]
    } else {
        &[Stage::HeadOnly, Stage::Finetune]
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn checkpoint_meta(cfg: &RunConfig, model: &Classifier<Real>, histories: Vec<crate::model::History>) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        kind: "classifier".into(),
        task: cfg.task,
        domain: cfg.domain,
        spec: model.spec.clone(),
        vit: model.backbone.vit,
        feature_dim: model.feature_dim(),
        feature_layer: crate::fusion::POOLED_LAYER.into(),
        explain_layer: model.backbone.explain_layer.clone(),
        pretrained_loaded: model.backbone.pretrained_loaded,
        seed: cfg.seed,
        split_seed: cfg.split_seed(),
        train_config: cfg.train.clone(),
        stages: stages_for(model.spec.architecture)[..histories.len()].to_vec(),
        histories,
        run_config: cfg.snapshot()?,
    })
}

fn train_one(cfg: &RunConfig, ctx: &Context, arch: Architecture, data: &BTreeMap<Split, SplitImages>) -> Result<PathBuf> {
    let layout = cfg.layout();
    let path = layout.checkpoint(arch);
    let stage1_path = layout.stage1_checkpoint(arch);
    let stages = stages_for(arch);
    let (mut model, mut histories) = if !ctx.force && stages.len() > 1 && stage1_path.exists() {
        log::info!("resuming {arch} from {}", stage1_path.display());
        let tm = TrainedModel::<Real>::load(&stage1_path)?;
        (tm.model, tm.meta.histories)
    } else {
        let spec = cfg.backbone_spec(arch);
        (Classifier::build(&spec, cfg.domain, ctx.cache_dir.as_deref(), cfg.seed)?, Vec::new())
    };
    let (train, val) = (&data[&Split::Train].data, &data[&Split::Val].data);
    for &stage in &stages[histories.len()..] {
        log::info!("training {arch} {stage} on {} images", train.len());
        let h = train_stage(&mut model, train, val, &cfg.train, stage, cfg.seed)?;
        log::info!("{arch} {stage}: best val AUROC {:.4} at epoch {}", h.best_val_auroc, h.best_epoch);
        histories.push(h);
        if stage == Stage::HeadOnly && stages.len() > 1 {
            let tm = TrainedModel {
                model: model.clone(),
                meta: checkpoint_meta(cfg, &model, histories.clone())?,
            };
            tm.save(&stage1_path)?;
        }
    }
    let tm = TrainedModel {
        meta: checkpoint_meta(cfg, &model, histories)?,
        model,
    };
    tm.save(&path)?;
    write_json(&layout.history(&tm.id()), &tm.meta.histories)?;
    let mut rows = Vec::new();
    for (&split, set) in data {
        let scores = tm.model.predict_proba(&set.data.images, cfg.domain, cfg.train.batch_size)?;
        rows.extend(prediction_rows(cfg, arch.as_str(), split, set, &scores));
    }
    write_predictions(&layout.predictions(&tm.id()), &rows)?;
    Ok(path)
}

/// Train every configured architecture. Returns the checkpoint paths.
pub fn cmd_train(cfg: &RunConfig, ctx: &Context) -> Result<Vec<PathBuf>> {
    write_effective(cfg)?;
    let layout = cfg.layout();
    let todo: Vec<Architecture> = cfg
        .architectures
        .iter()
        .copied()
        .filter(|&a| {
            let done = layout.checkpoint(a).exists() && !ctx.force;
            if done {
                log::info!("{} exists; skipping", layout.checkpoint(a).display());
            }
            !done
        })
        .collect();
    if !todo.is_empty() {
        let data = load_splits(cfg)?;
        for arch in todo {
            train_one(cfg, ctx, arch, &data)?;
        }
    }
    Ok(cfg.architectures.iter().map(|&a| layout.checkpoint(a)).collect())
}

/// Load the run's trained checkpoints, listing every missing one.
pub fn load_checkpoints(cfg: &RunConfig, archs: &[Architecture]) -> Result<Vec<TrainedModel<Real>>> {
    let layout = cfg.layout();
    let missing: Vec<PathBuf> = archs
        .iter()
        .map(|&a| layout.checkpoint(a))
        .filter(|p| !p.exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCheckpoints(missing));
    }
    archs.iter().map(|&a| TrainedModel::load(&layout.checkpoint(a))).collect()
}

/// Extract and cache features, then train the fusion head.
pub fn cmd_fuse(cfg: &RunConfig, ctx: &Context) -> Result<PathBuf> {
    write_effective(cfg)?;
    let layout = cfg.layout();
    let path = layout.fusion();
    if path.exists() && !ctx.force {
        log::info!("{} exists; skipping fusion", path.display());
        return Ok(path);
    }
    let models = load_checkpoints(cfg, &cfg.architectures)?;
    for m in &models {
        if m.meta.domain != cfg.domain {
            return Err(Error::DomainMismatch {
                expected: cfg.domain.to_string(),
                found: m.meta.domain.to_string(),
            });
        }
    }
    let data = load_splits(cfg)?;
    let batch = cfg.train.batch_size;
    let mut per_split: BTreeMap<Split, Vec<FeatureMatrix<Real>>> = BTreeMap::new();
    for m in &models {
        for (&split, set) in &data {
            let fm = FeatureMatrix::extract(m, &set.data.ids, &set.data.images, cfg.domain, batch)?;
            fm.write(&layout.features(&m.id(), split))?;
            per_split.entry(split).or_default().push(fm);
        }
    }
    let stats = per_split[&Split::Train]
        .iter()
        .map(|m| fit_standardizer(m, cfg.fusion.epsilon))
        .collect::<Result<Vec<_>>>()?;
    let sources = models
        .iter()
        .zip(&stats)
        .map(|(m, s)| FusionSource {
            checkpoint: m.id(),
            stats: s.clone(),
        })
        .collect();
    let train_x = concat_standardized(&per_split[&Split::Train], &stats)?;
    let val_x = concat_standardized(&per_split[&Split::Val], &stats)?;
    let mut fusion = train_fusion_head(
        cfg.task,
        sources,
        &train_x,
        &data[&Split::Train].data.labels,
        &val_x,
        &data[&Split::Val].data.labels,
        &cfg.train,
        cfg.seed,
    )?;
    fusion.meta.run_config = cfg.snapshot()?;
    log::info!("fusion: best val AUROC {:.4}", fusion.meta.history.best_val_auroc);
    fusion.save(&path)?;
    write_json(&layout.history(&fusion.id()), &[&fusion.meta.history])?;
    let mut rows = Vec::new();
    for (&split, set) in &data {
        let scores = fusion.predict_features(&per_split[&split])?;
        rows.extend(prediction_rows(cfg, "fusion", split, set, &scores));
    }
    write_predictions(&layout.predictions(&fusion.id()), &rows)?;
    Ok(path)
}

/// Fusion probabilities computed from images through every source model.
pub fn fusion_predict_images(cfg: &RunConfig, ids: &[String], images: &[Image<Real>]) -> Result<Vec<Real>> {
    let layout = cfg.layout();
    let path = layout.fusion();
    if !path.exists() {
        return Err(Error::MissingCheckpoints(vec![path]));
    }
    let fusion = FusionModel::<Real>::load(&path)?;
    let models = fusion.load_sources(&layout.checkpoint_dir())?;
    fusion.predict(&models, ids, images, cfg.domain, cfg.train.batch_size)
}

fn collect_predictions(dir: &Path) -> Result<Vec<PredictionRow>> {
    let pdir = dir.join("predictions");
    let mut rows = Vec::new();
    if pdir.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&pdir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        for f in files {
            rows.extend(read_predictions(&f)?);
        }
    }
    Ok(rows)
}

fn scored_sets(rows: &[PredictionRow], split: Split) -> Result<BTreeMap<RowKey, ScoredSet<f64>>> {
    let mut grouped: BTreeMap<RowKey, (Vec<String>, Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.split == split) {
        let e = grouped.entry(RowKey::new(r.task, r.domain, r.model.clone())).or_default();
        e.0.push(r.image_id.clone());
        e.1.push(r.score);
        e.2.push(r.label);
    }
    grouped
        .into_iter()
        .map(|(k, (ids, s, l))| Ok((k, ScoredSet::new(ids, s, l)?)))
        .collect()
}

/// Report over this run and every run listed in `evaluate.runs`. Fails
/// after writing the report when any metric is undefined.
pub fn cmd_evaluate(cfg: &RunConfig, _ctx: &Context) -> Result<EvalReport> {
    write_effective(cfg)?;
    let mut expected = Vec::new();
    let mut rows = Vec::new();
    let mut runs = vec![cfg.clone()];
    for dir in &cfg.evaluate.runs {
        let p = dir.join(EFFECTIVE_CONFIG);
        runs.push(RunConfig::load(&p, &[])?);
    }
    let mut seen = BTreeSet::new();
    for run in &runs {
        if !seen.insert(run.output_dir.clone()) {
            continue;
        }
        for m in run.report_models() {
            expected.push(RowKey::new(run.task, run.domain, m));
        }
        rows.extend(collect_predictions(&run.output_dir)?);
    }
    expected.sort();
    expected.dedup();
    let test = scored_sets(&rows, cfg.evaluate.split)?;
    let val = scored_sets(&rows, Split::Val)?;
    let report = evaluate_run(&test, &expected, &cfg.evaluate.threshold, Some(&val), cfg.evaluate.split.as_str(), cfg.seed)?;
    let dir = cfg.layout().eval_dir();
    report.write_csv(&dir.join("report.csv"))?;
    fs::write(dir.join("report.txt"), report.to_table())?;
    write_json(&dir.join("report.json"), &report)?;
    let undefined = report.undefined();
    if !undefined.is_empty() {
        return Err(Error::UndefinedMetric(undefined.join(", ")));
    }
    Ok(report)
}

/// Grad-CAM panels for the selected images. `ids` overrides the config's
/// image list. Returns the HTML report path.
pub fn cmd_explain(cfg: &RunConfig, ctx: &Context, ids: &[String]) -> Result<PathBuf> {
    write_effective(cfg)?;
    let dir = cfg.layout().explain_dir();
    let report = dir.join("report.html");
    if report.exists() && !ctx.force {
        log::info!("{} exists; skipping explain", report.display());
        return Ok(report);
    }
    let archs = if cfg.explain.architectures.is_empty() {
        cfg.architectures.clone()
    } else {
        cfg.explain.architectures.clone()
    };
    let mut models = load_checkpoints(cfg, &archs)?;
    let records = assigned_records(cfg)?;
    let wanted: Vec<String> = if !ids.is_empty() {
        ids.to_vec()
    } else if !cfg.explain.image_ids.is_empty() {
        cfg.explain.image_ids.clone()
    } else {
        records
            .iter()
            .filter(|r| r.split == Some(cfg.explain.split))
            .take(cfg.explain.max_images)
            .map(|r| r.image_id.clone())
            .collect()
    };
    let by_id: BTreeMap<&str, &ImageRecord> = records.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let base = manifest_base(cfg);
    let mut entries = Vec::new();
    for id in &wanted {
        let rec = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Data(format!("image `{id}` is not part of {}", cfg.task)))?;
        let raw = Image::<Real>::load(&rec.resolved_path(&base))?;
        let (input, display) = prepare(cfg, &raw, id)?;
        for tm in models.iter_mut() {
            let model_id = tm.id();
            let heat = explain(&mut tm.model, &input, cfg.explain.target_class, id)?;
            let p = probability(&tm.model, &input);
            let stem = format!("{model_id}__{id}");
            let png = dir.join("panels").join(format!("{stem}.png"));
            panel(&display, &overlay(&display, &heat, cfg.explain.alpha)).save_png(&png)?;
            write_json(&dir.join("panels").join(format!("{stem}.json")), &HeatmapSummary::new(&heat, p))?;
            entries.push(ReportEntry {
                task: format!("Task {} ({})", cfg.task.number(), cfg.task.definition().positive_class_name),
                domain: cfg.domain.to_string(),
                model: tm.meta.spec.architecture.as_str().to_string(),
                image_id: id.clone(),
                label: rec.label(cfg.task),
                probability: p,
                panel: format!("panels/{stem}.png"),
            });
        }
    }
    write_html_report(&report, &entries)?;
    Ok(report)
}

/// Write a synthetic dataset (and optionally a compact encoder archive).
pub fn cmd_synth(dir: &Path, config: &SynthConfig, encoder: Option<(&Path, usize)>, ctx: &Context) -> Result<PathBuf> {
    let manifest = dir.join("manifest.csv");
    if manifest.exists() && !ctx.force {
        log::info!("{} exists; skipping synth", manifest.display());
    } else {
        make_synthetic_dataset(dir, config)?;
    }
    if let Some((path, input_size)) = encoder {
        if !path.exists() || ctx.force {
            write_compact_encoder(path, input_size, config.seed)?;
        }
    }
    Ok(manifest)
}
