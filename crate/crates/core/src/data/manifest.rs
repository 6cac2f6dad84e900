//! Labeled image manifest: `image_id,image_path,task1_label,task2_label,task3_label`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::task::TaskId;
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 5] = [
    "image_id",
    "image_path",
    "task1_label",
    "task2_label",
    "task3_label",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_id: String,
    /// As written in the manifest; relative paths resolve against the
    /// manifest's directory (see [`ImageRecord::resolved_path`]).
    pub image_path: PathBuf,
    pub labels: [Option<u8>; 3],
    pub split: Option<Split>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, image_path: impl Into<PathBuf>) -> Self {
        Self {
            image_id: image_id.into(),
            image_path: image_path.into(),
            labels: [None; 3],
            split: None,
        }
    }

    pub fn with_label(mut self, task: TaskId, label: u8) -> Self {
        assert!(label <= 1, "labels are binary");
        self.labels[task.index()] = Some(label);
        self
    }

    pub fn label(&self, task: TaskId) -> Option<u8> {
        self.labels[task.index()]
    }

    pub fn participates(&self, task: TaskId) -> bool {
        self.label(task).is_some()
    }

    pub fn resolved_path(&self, base: &Path) -> PathBuf {
        if self.image_path.is_absolute() {
            self.image_path.clone()
        } else {
            base.join(&self.image_path)
        }
    }
}

fn parse_label(raw: &str, row: usize, column: &str) -> Result<Option<u8>> {
    match raw.trim() {
        "" => Ok(None),
        "0" => Ok(Some(0)),
        "1" => Ok(Some(1)),
        other => Err(Error::MalformedRow {
            row,
            message: format!("{column} must be 0, 1 or empty, got `{other}`"),
        }),
    }
}

/// Parse a manifest. Row numbers in errors are file line numbers (header = 1).
pub fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header = reader.headers()?.clone();
    let found: Vec<&str> = header.iter().map(str::trim).collect();
    if found != MANIFEST_HEADER {
        return Err(Error::BadHeader {
            expected: MANIFEST_HEADER.join(","),
            found: found.join(","),
        });
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 2;
        let row = row.map_err(|e| Error::MalformedRow {
            row: row_no,
            message: e.to_string(),
        })?;
        if row.len() != MANIFEST_HEADER.len() {
            return Err(Error::MalformedRow {
                row: row_no,
                message: format!("expected {} fields, found {}", MANIFEST_HEADER.len(), row.len()),
            });
        }
        let image_id = row[0].trim();
        if image_id.is_empty() {
            return Err(Error::MalformedRow {
                row: row_no,
                message: "empty image_id".into(),
            });
        }
        let mut labels = [None; 3];
        for (t, label) in labels.iter_mut().enumerate() {
            *label = parse_label(&row[2 + t], row_no, MANIFEST_HEADER[2 + t])?;
        }
        if labels.iter().all(Option::is_none) {
            return Err(Error::MalformedRow {
                row: row_no,
                message: format!("record `{image_id}` has no label for any task"),
            });
        }
        records.push(ImageRecord {
            image_id: image_id.to_string(),
            image_path: PathBuf::from(row[1].trim()),
            labels,
            split: None,
        });
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ImageRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for r in records {
        let lab = |t: usize| r.labels[t].map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            r.image_id.clone(),
            r.image_path.to_string_lossy().into_owned(),
            lab(0),
            lab(1),
            lab(2),
        ])?;
    }
    w.flush()?;
    Ok(())
}
