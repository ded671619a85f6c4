use std::fmt;

use serde::{Deserialize, Serialize};

use super::space::{CompositionSpace, Pair};
use crate::encoders::SyntheticWorldConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub const ALL: [SplitTag; 3] = [SplitTag::Train, SplitTag::Val, SplitTag::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One labelled row of a split's feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRecord {
    pub row: usize,
    pub pair: Pair,
    pub split: SplitTag,
}

/// Raw feature matrix `[n × raw_dim]` with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub tag: SplitTag,
    pub features: Tensor<f32>,
    pub labels: Vec<Pair>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = SampleRecord> + '_ {
        self.labels.iter().enumerate().map(|(row, &pair)| SampleRecord {
            row,
            pair,
            split: self.tag,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub space: CompositionSpace,
    pub config: SyntheticWorldConfig,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl World {
    pub fn split(&self, tag: SplitTag) -> &Split {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }

    pub fn raw_dim(&self) -> usize {
        self.train.features.last_dim()
    }

    /// Check labels and shapes against the space.
    pub fn validate(&self) -> Result<()> {
        let raw = self.raw_dim();
        if raw != self.config.raw_dim {
            return Err(Error::Format(format!(
                "features have {raw} columns but the config says raw_dim = {}",
                self.config.raw_dim
            )));
        }
        if self.config.n_attrs != self.space.n_attrs() || self.config.n_objs != self.space.n_objs() {
            return Err(Error::Format("config counts disagree with the composition space".into()));
        }
        for tag in SplitTag::ALL {
            let s = self.split(tag);
            if s.tag != tag {
                return Err(Error::Format(format!("split tagged {} stored as {tag}", s.tag)));
            }
            if s.features.rank() != 2 || s.features.shape()[1] != raw {
                return Err(Error::Format(format!(
                    "{tag} features {:?} do not have {raw} columns",
                    s.features.shape()
                )));
            }
            if s.features.shape()[0] != s.labels.len() {
                return Err(Error::Format(format!(
                    "{tag}: {} feature rows but {} labels",
                    s.features.shape()[0],
                    s.labels.len()
                )));
            }
            for (row, &p) in s.labels.iter().enumerate() {
                if !self.space.contains(p) {
                    return Err(Error::Format(format!("{tag} row {row}: pair {p} out of range")));
                }
                let seen = self.space.is_seen(p);
                if tag == SplitTag::Train && !seen {
                    return Err(Error::Format(format!(
                        "train row {row} carries unseen pair {p}"
                    )));
                }
                if !seen && !self.space.unseen().contains(&p) {
                    return Err(Error::Format(format!(
                        "{tag} row {row}: pair {p} is neither seen nor unseen"
                    )));
                }
            }
        }
        if self.train.is_empty() {
            return Err(Error::Format("empty training split".into()));
        }
        Ok(())
    }
}
