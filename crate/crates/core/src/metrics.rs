//! Screening metrics and tabular evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TaskId;
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Parallel arrays of image ids, scores in `[0, 1]` and binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet<T> {
    pub ids: Vec<String>,
    pub scores: Vec<T>,
    pub labels: Vec<u8>,
}

impl<T: Scalar> ScoredSet<T> {
    pub fn new(ids: Vec<String>, scores: Vec<T>, labels: Vec<u8>) -> Result<Self> {
        if ids.len() != scores.len() || scores.len() != labels.len() {
            return Err(Error::Data(format!(
                "scored set lengths differ: {} ids, {} scores, {} labels",
                ids.len(),
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        Ok(Self { ids, scores, labels })
    }

    /// Unnamed set; ids are the indices.
    pub fn from_scores(scores: Vec<T>, labels: Vec<u8>) -> Result<Self> {
        let ids = (0..scores.len()).map(|i| i.to_string()).collect();
        Self::new(ids, scores, labels)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    fn sorted_desc(&self) -> Vec<(f64, u8)> {
        let mut v: Vec<(f64, u8)> = self
            .scores
            .iter()
            .map(|s| s.as_f64())
            .zip(self.labels.iter().copied())
            .collect();
        v.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        v
    }
}

/// Probability that a random positive outranks a random negative, ties ½.
pub fn auroc<T: Scalar>(set: &ScoredSet<T>) -> Result<f64> {
    let (p, n) = (set.positives(), set.negatives());
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    // Mann-Whitney U from mid-ranks (ascending); half-integers are exact in f64.
    let mut v = set.sorted_desc();
    v.reverse();
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1].0 == v[i].0 {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid_rank * v[i..=j].iter().filter(|e| e.1 == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// Average precision: `sum_k (R_k - R_{k-1}) * P_k` over distinct score
/// thresholds, highest first.
pub fn auprc<T: Scalar>(set: &ScoredSet<T>) -> Result<f64> {
    let p = set.positives();
    if p == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let v = set.sorted_desc();
    let (mut tp, mut fp, mut prev_tp) = (0usize, 0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < v.len() {
        let t = v[i].0;
        while i < v.len() && v[i].0 == t {
            if v[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (tp - prev_tp) as f64 / p as f64 * precision;
        prev_tp = tp;
    }
    Ok(ap)
}

/// `(sensitivity, specificity)` with positive prediction iff `score >= threshold`.
/// A metric whose denominator class is absent is `None`.
pub fn sensitivity_specificity<T: Scalar>(set: &ScoredSet<T>, threshold: f64) -> (Option<f64>, Option<f64>) {
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (s, &l) in set.scores.iter().zip(&set.labels) {
        let pred = s.as_f64() >= threshold;
        match (l, pred) {
            (1, true) => tp += 1,
            (1, false) => fn_ += 1,
            (_, false) => tn += 1,
            (_, true) => fp += 1,
        }
    }
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    (ratio(tp, fn_), ratio(tn, fp))
}

/// Threshold maximizing Youden's J (`sens + spec - 1`) over the distinct
/// scores; ties resolve to the higher threshold.
pub fn youden_threshold<T: Scalar>(set: &ScoredSet<T>) -> Result<f64> {
    if set.positives() == 0 || set.negatives() == 0 {
        return Err(Error::UndefinedMetric("Youden threshold needs both classes".into()));
    }
    let mut cands: Vec<f64> = set.scores.iter().map(|s| s.as_f64()).collect();
    cands.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    cands.dedup();
    let mut best = (f64::NEG_INFINITY, 0.5);
    for t in cands {
        if let (Some(se), Some(sp)) = sensitivity_specificity(set, t) {
            let j = se + sp - 1.0;
            if j > best.0 {
                best = (j, t);
            }
        }
    }
    Ok(best.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase", deny_unknown_fields)]
pub enum ThresholdRule {
    Fixed { value: f64 },
    Youden,
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::Fixed { value: 0.5 }
    }
}

impl ThresholdRule {
    pub fn describe(&self) -> String {
        match self {
            ThresholdRule::Fixed { value } => format!("fixed:{value}"),
            ThresholdRule::Youden => "youden-on-validation".into(),
        }
    }
}

/// Report row identity.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowKey {
    pub task: TaskId,
    pub domain: Domain,
    pub model: String,
}

impl RowKey {
    pub fn new(task: TaskId, domain: Domain, model: impl Into<String>) -> Self {
        Self {
            task,
            domain,
            model: model.into(),
        }
    }

    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.task, self.domain, self.model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub key: RowKey,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub threshold: f64,
    pub n: usize,
}

impl EvalRow {
    pub fn metrics(&self) -> [Option<f64>; 4] {
        [self.auroc, self.auprc, self.sensitivity, self.specificity]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub threshold_rule: ThresholdRule,
    pub split: String,
    pub seed: u64,
}

/// Build a report with one row per expected key.
///
/// `validation` supplies per-row validation scores when the rule is Youden.
pub fn evaluate_run<T: Scalar>(
    predictions: &BTreeMap<RowKey, ScoredSet<T>>,
    expected: &[RowKey],
    rule: &ThresholdRule,
    validation: Option<&BTreeMap<RowKey, ScoredSet<T>>>,
    split: &str,
    seed: u64,
) -> Result<EvalReport> {
    let missing: Vec<String> = expected
        .iter()
        .filter(|k| !predictions.contains_key(*k))
        .map(RowKey::label)
        .collect();
    if !missing.is_empty() || expected.is_empty() {
        return Err(Error::MissingRows(missing));
    }
    let mut rows = Vec::with_capacity(expected.len());
    for key in expected {
        let set = &predictions[key];
        let threshold = match rule {
            ThresholdRule::Fixed { value } => *value,
            ThresholdRule::Youden => {
                let val = validation
                    .and_then(|v| v.get(key))
                    .ok_or_else(|| Error::MissingRows(vec![format!("{} (validation)", key.label())]))?;
                youden_threshold(val)?
            }
        };
        let (sensitivity, specificity) = sensitivity_specificity(set, threshold);
        rows.push(EvalRow {
            key: key.clone(),
            auroc: auroc(set).ok(),
            auprc: auprc(set).ok(),
            sensitivity,
            specificity,
            threshold,
            n: set.len(),
        });
    }
    Ok(EvalReport {
        rows,
        threshold_rule: rule.clone(),
        split: split.to_string(),
        seed,
    })
}

/// Display name for a model id in tables.
pub fn model_title(id: &str) -> &str {
    match id {
        "lightweight_cnn" => "MobileNetV2",
        "residual_cnn" => "ResNet18",
        "patch_transformer" => "ViT-B/16",
        "retinal_foundation" => "RETFound",
        "fusion" => "Fusion",
        other => other,
    }
}

impl EvalReport {
    pub fn undefined(&self) -> Vec<String> {
        const NAMES: [&str; 4] = ["auroc", "auprc", "sensitivity", "specificity"];
        self.rows
            .iter()
            .flat_map(|r| {
                r.metrics()
                    .into_iter()
                    .zip(NAMES)
                    .filter(|(m, _)| m.is_none())
                    .map(move |(_, n)| format!("{} {n}", r.key.label()))
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "task", "domain", "model", "auroc", "auprc", "sensitivity", "specificity", "threshold", "n",
            "threshold_rule", "split", "seed",
        ])?;
        let fmt = |m: Option<f64>| m.map(|v| format!("{v:.6}")).unwrap_or_else(|| "undefined".into());
        for r in &self.rows {
            w.write_record([
                r.key.task.number().to_string(),
                r.key.domain.to_string(),
                r.key.model.clone(),
                fmt(r.auroc),
                fmt(r.auprc),
                fmt(r.sensitivity),
                fmt(r.specificity),
                format!("{:.6}", r.threshold),
                r.n.to_string(),
                self.threshold_rule.describe(),
                self.split.clone(),
                self.seed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Plain-text table in task x domain blocks; `*` marks the best value
    /// per metric within a block.
    pub fn to_table(&self) -> String {
        let mut blocks: BTreeMap<(TaskId, Domain), Vec<&EvalRow>> = BTreeMap::new();
        for r in &self.rows {
            blocks.entry((r.key.task, r.key.domain)).or_default().push(r);
        }
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16}{:>10}{:>10}{:>10}{:>10}",
            "Model", "AUROC", "AUPRC", "Sens.", "Spec."
        );
        for ((task, domain), rows) in blocks {
            let def = task.definition();
            let _ = writeln!(
                out,
                "--- Task {} ({} vs {}): {} ---",
                task.number(),
                def.positive_class_name,
                def.negative_class_name,
                domain.title()
            );
            let mut best = [f64::NEG_INFINITY; 4];
            for r in &rows {
                for (b, m) in best.iter_mut().zip(r.metrics()) {
                    if let Some(v) = m {
                        *b = b.max(v);
                    }
                }
            }
            for r in rows {
                let name = match r.key.model.as_str() {
                    "fusion" => format!("Fusion ({})", if domain == Domain::Rgb { "RGB" } else { "Freq." }),
                    m => model_title(m).to_string(),
                };
                let _ = write!(out, "{name:<16}");
                for (m, b) in r.metrics().into_iter().zip(best) {
                    let cell = match m {
                        Some(v) => format!("{:.1}%{}", v * 100.0, if v == b { "*" } else { " " }),
                        None => "undef ".into(),
                    };
                    let _ = write!(out, "{cell:>10}");
                }
                out.push('\n');
            }
        }
        let _ = writeln!(out, "threshold: {}; split: {}; seed: {}", self.threshold_rule.describe(), self.split, self.seed);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(scores: &[f64], labels: &[u8]) -> ScoredSet<f64> {
        ScoredSet::from_scores(scores.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&set(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(auroc(&set(&[0.5; 4], &[0, 1, 0, 1])).unwrap(), 0.5);
        assert!(auroc(&set(&[0.1, 0.2], &[1, 1])).is_err());
    }

    #[test]
    fn four_point_case() {
        let s = set(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]);
        // pairs (neg, pos): (0.1,0.35) (0.1,0.8) (0.4,0.35) (0.4,0.8) -> 3 of 4
        assert_eq!(auroc(&s).unwrap(), 0.75);
        // thresholds 0.8: P=1 R=.5; 0.4: P=.5 R=.5; 0.35: P=2/3 R=1; 0.1: P=.5 R=1
        let want = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
        assert!((auprc(&s).unwrap() - want).abs() < 1e-15);
        assert_eq!(sensitivity_specificity(&s, 0.5), (Some(0.5), Some(1.0)));
    }

    #[test]
    fn auprc_edge_cases() {
        assert_eq!(auprc(&set(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(auprc(&set(&[0.3, 0.9, 0.1], &[1, 1, 1])).unwrap(), 1.0);
        assert!(auprc(&set(&[0.3, 0.9], &[0, 0])).is_err());
    }

    #[test]
    fn sens_spec_edges() {
        let s = set(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]);
        assert_eq!(sensitivity_specificity(&s, 0.5), (Some(1.0), Some(1.0)));
        assert_eq!(sensitivity_specificity(&s, 0.0).0, Some(1.0));
        let only_neg = set(&[0.3], &[0]);
        assert_eq!(sensitivity_specificity(&only_neg, 0.5), (None, Some(1.0)));
    }

    #[test]
    fn youden_picks_separating_threshold() {
        let s = set(&[0.1, 0.2, 0.3, 0.7, 0.8], &[0, 0, 0, 1, 1]);
        assert_eq!(youden_threshold(&s).unwrap(), 0.7);
    }

    #[test]
    fn report_rows_and_missing() {
        let k = RowKey::new(TaskId::Referable, Domain::Rgb, "fusion");
        let mut preds = BTreeMap::new();
        preds.insert(k.clone(), set(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]));
        let rep = evaluate_run(&preds, std::slice::from_ref(&k), &ThresholdRule::default(), None, "test", 42).unwrap();
        assert_eq!(rep.rows[0].metrics(), [Some(1.0); 4]);
        assert!(rep.undefined().is_empty());
        assert!(rep.to_table().contains("Fusion (RGB)"));

        let empty: BTreeMap<RowKey, ScoredSet<f64>> = BTreeMap::new();
        match evaluate_run(&empty, std::slice::from_ref(&k), &ThresholdRule::default(), None, "test", 42) {
            Err(Error::MissingRows(m)) => assert_eq!(m, vec!["task2/rgb/fusion".to_string()]),
            other => panic!("{other:?}"),
        }
    }
}
