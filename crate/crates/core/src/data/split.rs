//! Deterministic stratified train/validation/test assignment, one task at a time.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;

use super::manifest::{ImageRecord, Split};
use super::task::TaskId;
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const DEFAULT_RATIOS: [f64; 3] = [0.64, 0.16, 0.20];
pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Debug, PartialEq)]
pub struct SplitAssignment {
    pub task: TaskId,
    pub seed: u64,
    /// (train, val, test)
    pub ratios: [f64; 3],
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn get(&self, image_id: &str) -> Option<Split> {
        self.assignment.get(image_id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.values().filter(|&&s| s == split).count()
    }

    /// Copies of the task's records with `split` filled from this assignment.
    pub fn apply(&self, records: &[ImageRecord]) -> Vec<ImageRecord> {
        records
            .iter()
            .filter_map(|r| {
                self.get(&r.image_id).map(|s| {
                    let mut r = r.clone();
                    r.split = Some(s);
                    r
                })
            })
            .collect()
    }

    pub fn ids_in(&self, split: Split) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

fn floor_eps(x: f64) -> usize {
    (x + 1e-9).floor().max(0.0) as usize
}

/// `[train, val, test]` counts for one class: each cell is the floor or
/// ceil of its quota and the cells sum to the class size.
fn roundings(size: usize, ratios: [f64; 3]) -> Vec<[usize; 3]> {
    let options = |s: usize| {
        let q = size as f64 * ratios[s];
        let lo = floor_eps(q);
        if (q - lo as f64).abs() > 1e-9 { vec![lo, lo + 1] } else { vec![lo] }
    };
    let mut out = Vec::new();
    for &tr in &options(0) {
        for &v in &options(1) {
            for &t in &options(2) {
                if tr + v + t == size {
                    out.push([tr, v, t]);
                }
            }
        }
    }
    out
}

/// Per-class (val, test) counts. Every (class, split) cell is within one
/// record of its quota; among those roundings the one whose split totals
/// are closest to `N * ratio` wins, then the one closest per cell.
fn apportion(class_sizes: [usize; 2], ratios: [f64; 3]) -> Option<[[usize; 2]; 2]> {
    let n: usize = class_sizes.iter().sum();
    let cell_dev = |c: usize, r: &[usize; 3]| -> f64 {
        (0..3).map(|s| (r[s] as f64 - class_sizes[c] as f64 * ratios[s]).powi(2)).sum()
    };
    let mut best: Option<((f64, f64), [[usize; 2]; 2])> = None;
    for a in roundings(class_sizes[0], ratios) {
        for b in roundings(class_sizes[1], ratios) {
            let total_dev: f64 = (0..3).map(|s| ((a[s] + b[s]) as f64 - n as f64 * ratios[s]).abs()).sum();
            let key = (total_dev, cell_dev(0, &a) + cell_dev(1, &b));
            let better = best.as_ref().is_none_or(|(k, _)| {
                key.0 < k.0 - 1e-9 || ((key.0 - k.0).abs() <= 1e-9 && key.1 < k.1 - 1e-12)
            });
            if better {
                best = Some((key, [[a[1], a[2]], [b[1], b[2]]]));
            }
        }
    }
    best.map(|(_, c)| c)
}

/// Stratified split of the records labeled for `task`.
///
/// Every record must carry a label for `task`; filter with
/// [`ImageRecord::participates`] first.
pub fn stratified_split(
    records: &[ImageRecord],
    ratios: [f64; 3],
    seed: u64,
    task: TaskId,
) -> Result<SplitAssignment> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let mut by_class: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for r in records {
        match r.label(task) {
            Some(l) => by_class[l as usize].push(&r.image_id),
            None => {
                return Err(Error::Data(format!(
                    "record `{}` has no label for {task}",
                    r.image_id
                )))
            }
        }
    }
    let requested = ratios.iter().filter(|r| **r > 0.0).count();
    for (label, ids) in by_class.iter().enumerate() {
        if !ids.is_empty() && ids.len() < requested {
            return Err(Error::Data(format!(
                "class {label} of {task} has {} records, fewer than the {requested} splits requested",
                ids.len()
            )));
        }
    }
    let sizes = [by_class[0].len(), by_class[1].len()];
    let counts = apportion(sizes, ratios)
        .ok_or_else(|| Error::Data(format!("cannot apportion class sizes {sizes:?}")))?;

    let mut assignment = BTreeMap::new();
    for (label, ids) in by_class.iter_mut().enumerate() {
        ids.sort_unstable();
        let mut rng = rng_for(seed, &["split", &task.to_string(), &label.to_string()]);
        ids.shuffle(&mut rng);
        let [nv, nt] = counts[label];
        for (i, id) in ids.iter().enumerate() {
            let s = if i < nt {
                Split::Test
            } else if i < nt + nv {
                Split::Val
            } else {
                Split::Train
            };
            assignment.insert(id.to_string(), s);
        }
    }
    Ok(SplitAssignment {
        task,
        seed,
        ratios,
        assignment,
    })
}

/// `(count_negative, count_positive)` among records labeled for `task`
/// whose `split` field equals `split`.
pub fn class_distribution(records: &[ImageRecord], task: TaskId, split: Split) -> (usize, usize) {
    records
        .iter()
        .filter(|r| r.split == Some(split))
        .filter_map(|r| r.label(task))
        .fold((0, 0), |(n, p), l| if l == 1 { (n, p + 1) } else { (n + 1, p) })
}

/// Write `image_id,task_id,split` rows for one or more assignments.
pub fn write_splits(path: &Path, splits: &[SplitAssignment]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image_id", "task_id", "split"])?;
    for s in splits {
        for (id, split) in &s.assignment {
            w.write_record([id.as_str(), &s.task.number().to_string(), split.as_str()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a split file back as `task -> image_id -> split`.
pub fn read_splits(path: &Path) -> Result<BTreeMap<TaskId, BTreeMap<String, Split>>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != ["image_id", "task_id", "split"] {
        return Err(Error::BadHeader {
            expected: "image_id,task_id,split".into(),
            found: header.join(","),
        });
    }
    let mut out: BTreeMap<TaskId, BTreeMap<String, Split>> = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let bad = |m: String| Error::MalformedRow { row: i + 2, message: m };
        let task: u8 = row[1].trim().parse().map_err(|_| bad(format!("bad task id `{}`", &row[1])))?;
        let task = TaskId::try_from(task).map_err(|e| bad(e.to_string()))?;
        let split: Split = row[2].trim().parse().map_err(|e: Error| bad(e.to_string()))?;
        out.entry(task).or_default().insert(row[0].trim().to_string(), split);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(neg: usize, pos: usize, task: TaskId) -> Vec<ImageRecord> {
        (0..neg + pos)
            .map(|i| {
                ImageRecord::new(format!("img{i:04}"), format!("img{i:04}.png"))
                    .with_label(task, u8::from(i >= neg))
            })
            .collect()
    }

    #[test]
    fn single_class_exact_division() {
        let recs = records(10, 0, TaskId::Quality);
        for seed in [0, 1, 99] {
            let s = stratified_split(&recs, [0.8, 0.1, 0.1], seed, TaskId::Quality).unwrap();
            assert_eq!(
                (s.count(Split::Train), s.count(Split::Val), s.count(Split::Test)),
                (8, 1, 1)
            );
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let recs = records(40, 33, TaskId::Referable);
        let a = stratified_split(&recs, DEFAULT_RATIOS, 7, TaskId::Referable).unwrap();
        let b = stratified_split(&recs, DEFAULT_RATIOS, 7, TaskId::Referable).unwrap();
        assert_eq!(a, b);
        let c = stratified_split(&recs, DEFAULT_RATIOS, 8, TaskId::Referable).unwrap();
        assert_ne!(a.assignment, c.assignment);
    }

    #[test]
    fn input_order_does_not_matter() {
        let recs = records(20, 25, TaskId::Quality);
        let mut rev = recs.clone();
        rev.reverse();
        let a = stratified_split(&recs, DEFAULT_RATIOS, 3, TaskId::Quality).unwrap();
        let b = stratified_split(&rev, DEFAULT_RATIOS, 3, TaskId::Quality).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        let recs = records(2, 10, TaskId::Quality);
        assert!(matches!(
            stratified_split(&recs, DEFAULT_RATIOS, 1, TaskId::Quality),
            Err(Error::Data(_))
        ));
        let recs = records(10, 10, TaskId::Quality);
        assert!(matches!(
            stratified_split(&recs, [0.5, 0.3, 0.3], 1, TaskId::Quality),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            stratified_split(&recs, DEFAULT_RATIOS, 1, TaskId::Referable),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn distribution_counts() {
        assert_eq!(class_distribution(&[], TaskId::Quality, Split::Train), (0, 0));
        let recs = records(30, 20, TaskId::Quality);
        let s = stratified_split(&recs, DEFAULT_RATIOS, 42, TaskId::Quality).unwrap();
        let applied = s.apply(&recs);
        let total: usize = Split::ALL
            .iter()
            .map(|&sp| {
                let (n, p) = class_distribution(&applied, TaskId::Quality, sp);
                n + p
            })
            .sum();
        assert_eq!(total, 50);
    }

    #[test]
    fn split_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = records(30, 20, TaskId::Quality);
        let s = stratified_split(&recs, DEFAULT_RATIOS, 42, TaskId::Quality).unwrap();
        let p = dir.path().join("splits.csv");
        write_splits(&p, std::slice::from_ref(&s)).unwrap();
        let back = read_splits(&p).unwrap();
        assert_eq!(back[&TaskId::Quality], s.assignment);
    }
}
