use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input representation a model was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Rgb,
    Frequency,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Rgb, Domain::Frequency];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Rgb => "rgb",
            Domain::Frequency => "frequency",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Domain::Rgb => "RGB domain",
            Domain::Frequency => "Frequency domain",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Domain::Rgb),
            "frequency" | "freq" => Ok(Domain::Frequency),
            other => Err(Error::Config(format!("unknown domain `{other}`"))),
        }
    }
}
