use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const NUM_FEATURES: usize = 17;
pub const BIN_HOURS: f64 = 2.0;
/// 48 hours at two hours per bin.
pub const DEFAULT_MAX_BINS: usize = 24;

/// One row of an episode: hour offset from stay start and optional values.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRow {
    pub hour: f64,
    pub values: [Option<f64>; NUM_FEATURES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EhrEpisode {
    pub stay_id: u64,
    pub subject_id: u64,
    pub start_h: f64,
    pub end_h: f64,
    pub events: Vec<EventRow>,
    pub labels: Vec<u8>,
}

impl EhrEpisode {
    pub fn length_h(&self) -> f64 {
        self.end_h - self.start_h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CxrSample {
    pub image_id: String,
    pub subject_id: u64,
    pub taken_at_h: f64,
    /// `[1×side×side]`, values in [0, 1].
    pub pixels: Tensor,
    pub aux_labels: Vec<u8>,
}

/// A stay matched to an image of the same subject taken during the stay.
/// Indices refer to the episode and image lists it was matched from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairedSample {
    pub episode: usize,
    pub image: usize,
}

/// `[T×34]`: 17 standardized values followed by 17 observed-masks per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedEpisode {
    pub data: Tensor,
}

impl DiscretizedEpisode {
    pub fn bins(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn value(&self, bin: usize, feature: usize) -> f64 {
        self.data.row(bin)[feature]
    }

    pub fn mask(&self, bin: usize, feature: usize) -> f64 {
        self.data.row(bin)[NUM_FEATURES + feature]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
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
            other => Err(Error::Config(format!("unknown split {other:?}; expected train, val or test"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub cxr: usize,
    pub ehr: usize,
    pub pairs: usize,
}
