use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three binary screening tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum TaskId {
    Quality = 1,
    Referable = 2,
    MacularEdema = 3,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Quality, TaskId::Referable, TaskId::MacularEdema];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn definition(self) -> TaskDefinition {
        match self {
            TaskId::Quality => TaskDefinition {
                task: self,
                positive_class_name: "Gradable",
                negative_class_name: "Ungradable",
                input_resolution: Some(448),
            },
            TaskId::Referable => TaskDefinition {
                task: self,
                positive_class_name: "RDR",
                negative_class_name: "No RDR",
                input_resolution: None,
            },
            TaskId::MacularEdema => TaskDefinition {
                task: self,
                positive_class_name: "DME",
                negative_class_name: "No DME",
                input_resolution: None,
            },
        }
    }
}

impl TryFrom<u8> for TaskId {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(TaskId::Quality),
            2 => Ok(TaskId::Referable),
            3 => Ok(TaskId::MacularEdema),
            other => Err(Error::Config(format!("task id must be 1, 2 or 3, got {other}"))),
        }
    }
}

impl From<TaskId> for u8 {
    fn from(t: TaskId) -> u8 {
        t.number()
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task{}", self.number())
    }
}

/// Class naming and input resolution for a task. `input_resolution` is
/// `None` where the backbone's native size is used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskDefinition {
    pub task: TaskId,
    pub positive_class_name: &'static str,
    pub negative_class_name: &'static str,
    pub input_resolution: Option<usize>,
}
