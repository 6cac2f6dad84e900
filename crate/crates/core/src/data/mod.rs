//! Manifest loading, task definitions and per-task stratified splits.

mod manifest;
mod split;
mod task;

pub use manifest::{load_manifest, write_manifest, ImageRecord, Split, MANIFEST_HEADER};
pub use split::{
    class_distribution, read_splits, stratified_split, write_splits, SplitAssignment,
    DEFAULT_RATIOS, DEFAULT_SEED,
};
pub use task::{TaskDefinition, TaskId};
