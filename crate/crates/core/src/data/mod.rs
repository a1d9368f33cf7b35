//! Motion and query data model, the dataset file format and the synthetic
//! benchmark generator.

mod io;
mod motion;
pub mod synth;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, FORMAT_TAG, FORMAT_VERSION};
pub use motion::{
    index_to_time, recover_joints, snippetize, time_to_index, JointLayout, MotionSequence, RawPoseSequence,
    SkeletonGraph, SlotSource, DEFAULT_FPS, JOINTS, JOINT_FEATURES, KINEMATIC_PARENTS, RAW_POSE_DIM,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{what}: value {value} outside [{lo}, {hi}]")]
    Range {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("{what}: {msg}")]
    Invalid { what: String, msg: String },
    #[error("record {record}: {msg}")]
    Parse { record: usize, msg: String },
    #[error("unsupported dataset format {format:?} version {version}")]
    Version { format: String, version: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::Invalid {
                what: "split".into(),
                msg: format!("unknown split {other:?}"),
            }),
        }
    }
}

/// A text query grounded in one motion.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySample {
    pub motion_id: String,
    pub token_ids: Vec<usize>,
    pub text: String,
    /// Ground-truth `(t_s, t_e)` in seconds.
    pub span: (f64, f64),
    pub split: Split,
}

/// Motions, queries and the token vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub fps: f64,
    pub vocab: Vec<String>,
    pub motions: Vec<MotionSequence>,
    pub samples: Vec<QuerySample>,
}

/// Upper bound on query length in tokens.
pub const MAX_QUERY_TOKENS: usize = 64;

impl Dataset {
    pub fn motion_index(&self) -> HashMap<&str, usize> {
        self.motions.iter().enumerate().map(|(i, m)| (m.id.as_str(), i)).collect()
    }

    pub fn motion(&self, id: &str) -> Option<&MotionSequence> {
        self.motions.iter().find(|m| m.id == id)
    }

    /// Sample indices in a split, in file order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let lookup: HashMap<&str, usize> = self.vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        text.split_whitespace()
            .map(|w| lookup.get(w.to_lowercase().as_str()).copied().unwrap_or(0))
            .collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let index = self.motion_index();
        if index.len() != self.motions.len() {
            return Err(DataError::Invalid {
                what: "dataset".into(),
                msg: "duplicate motion id".into(),
            });
        }
        for m in &self.motions {
            m.validate()?;
        }
        let mut split_of: HashMap<&str, Split> = HashMap::new();
        for (k, s) in self.samples.iter().enumerate() {
            let bad = |msg: String| DataError::Invalid {
                what: format!("sample {k}"),
                msg,
            };
            let Some(&mi) = index.get(s.motion_id.as_str()) else {
                return Err(bad(format!("unknown motion {:?}", s.motion_id)));
            };
            let d = self.motions[mi].duration;
            let (ts, te) = s.span;
            if !(0.0 <= ts && ts < te && te <= d + 1e-9) {
                return Err(bad(format!("span ({ts}, {te}) invalid for duration {d}")));
            }
            if s.token_ids.is_empty() || s.token_ids.len() > MAX_QUERY_TOKENS {
                return Err(bad(format!("{} tokens", s.token_ids.len())));
            }
            if let Some(&t) = s.token_ids.iter().find(|&&t| t >= self.vocab.len()) {
                return Err(bad(format!("token {t} outside vocabulary of {}", self.vocab.len())));
            }
            match split_of.insert(s.motion_id.as_str(), s.split) {
                Some(prev) if prev != s.split => {
                    return Err(bad(format!("motion {:?} appears in two splits", s.motion_id)));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Per-split counts for reporting.
    pub fn stats(&self) -> DatasetStats {
        let mut out = DatasetStats {
            vocab_size: self.vocab.len(),
            splits: Vec::new(),
        };
        let index = self.motion_index();
        for split in [Split::Train, Split::Val, Split::Test] {
            let samples: Vec<&QuerySample> = self.samples.iter().filter(|s| s.split == split).collect();
            if samples.is_empty() {
                continue;
            }
            let motions: HashSet<&str> = samples.iter().map(|s| s.motion_id.as_str()).collect();
            let total_duration: f64 = motions.iter().map(|m| self.motions[index[m]].duration).sum();
            let total_moment: f64 = samples.iter().map(|s| s.span.1 - s.span.0).sum();
            let total_words: usize = samples.iter().map(|s| s.token_ids.len()).sum();
            out.splits.push(SplitStats {
                split,
                motions: motions.len(),
                queries: samples.len(),
                mean_motion_seconds: total_duration / motions.len() as f64,
                mean_moment_seconds: total_moment / samples.len() as f64,
                mean_query_words: total_words as f64 / samples.len() as f64,
            });
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitStats {
    pub split: Split,
    pub motions: usize,
    pub queries: usize,
    pub mean_motion_seconds: f64,
    pub mean_moment_seconds: f64,
    pub mean_query_words: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub vocab_size: usize,
    pub splits: Vec<SplitStats>,
}
