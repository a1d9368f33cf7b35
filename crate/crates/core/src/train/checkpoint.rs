//! Binary checkpoints: `MLPC` magic, a `u32` format version, a length-
//! prefixed text manifest, then little-endian `f64` arrays.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{TrainConfig, TrainError};
use crate::Tensor;

pub const MAGIC: &[u8; 4] = b"MLPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

impl TensorKind {
    fn as_str(self) -> &'static str {
        match self {
            TensorKind::Param => "param",
            TensorKind::Buffer => "buffer",
            TensorKind::AdamM => "adam_m",
            TensorKind::AdamV => "adam_v",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "param" => TensorKind::Param,
            "buffer" => TensorKind::Buffer,
            "adam_m" => TensorKind::AdamM,
            "adam_v" => TensorKind::AdamV,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub kind: TensorKind,
    pub name: String,
    pub value: Tensor,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab_size: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub adam_t: u64,
    pub best_val: Option<f64>,
    pub tensors: Vec<NamedTensor>,
}

pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    format!("{:x}", Sha256::digest(json.as_bytes()))
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        let mut manifest = String::new();
        let _ = writeln!(manifest, "config_hash {}", config_hash(&self.config));
        let _ = writeln!(manifest, "config {config}");
        let _ = writeln!(manifest, "vocab_size {}", self.vocab_size);
        let _ = writeln!(manifest, "epoch {}", self.epoch);
        let _ = writeln!(manifest, "step {}", self.step);
        let _ = writeln!(manifest, "adam_t {}", self.adam_t);
        match self.best_val {
            Some(v) => writeln!(manifest, "best_val {v:?}"),
            None => writeln!(manifest, "best_val none"),
        }
        .expect("write to string");
        let mut offset = 0usize;
        for t in &self.tensors {
            let dims: Vec<String> = t.value.shape().iter().map(usize::to_string).collect();
            let dims = if dims.is_empty() { "-".to_string() } else { dims.join(",") };
            let _ = writeln!(manifest, "tensor {} {} {} {}", t.kind.as_str(), t.name, dims, offset);
            offset += 8 * t.value.len();
        }

        let mut out = Vec::with_capacity(16 + manifest.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for t in &self.tensors {
            for v in t.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing MLPC magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let manifest = bytes
            .get(16..16 + len)
            .ok_or_else(|| corrupt("truncated manifest"))
            .and_then(|m| std::str::from_utf8(m).map_err(|e| corrupt(e.to_string())))?;
        let data = &bytes[16 + len..];

        let mut hash = None;
        let mut config: Option<TrainConfig> = None;
        let (mut vocab_size, mut epoch, mut step, mut adam_t, mut best_val) = (None, None, None, None, None);
        let mut tensors = Vec::new();
        for (ln, line) in manifest.lines().enumerate() {
            let (key, rest) = line.split_once(' ').ok_or_else(|| corrupt(format!("manifest line {ln}")))?;
            let num = |s: &str| s.parse::<u64>().map_err(|e| corrupt(format!("manifest line {ln}: {e}")));
            match key {
                "config_hash" => hash = Some(rest.to_string()),
                "config" => config = Some(serde_json::from_str(rest).map_err(|e| corrupt(format!("config: {e}")))?),
                "vocab_size" => vocab_size = Some(num(rest)? as usize),
                "epoch" => epoch = Some(num(rest)? as usize),
                "step" => step = Some(num(rest)?),
                "adam_t" => adam_t = Some(num(rest)?),
                "best_val" => {
                    best_val = Some(match rest {
                        "none" => None,
                        v => Some(v.parse::<f64>().map_err(|e| corrupt(format!("best_val: {e}")))?),
                    })
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 4 {
                        return Err(corrupt(format!("manifest line {ln}: expected 4 tensor fields")));
                    }
                    let kind = TensorKind::parse(f[0]).ok_or_else(|| corrupt(format!("unknown tensor kind {}", f[0])))?;
                    let shape: Vec<usize> = if f[2] == "-" {
                        Vec::new()
                    } else {
                        f[2].split(',').map(|d| num(d).map(|v| v as usize)).collect::<Result<_, _>>()?
                    };
                    let offset = num(f[3])? as usize;
                    let n: usize = shape.iter().product();
                    let raw = data
                        .get(offset..offset + 8 * n)
                        .ok_or_else(|| corrupt(format!("tensor {} extends past end of file", f[1])))?;
                    let values = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    tensors.push(NamedTensor {
                        kind,
                        name: f[1].to_string(),
                        value: Tensor::new(shape, values).map_err(|e| corrupt(e.to_string()))?,
                    });
                }
                other => return Err(corrupt(format!("unknown manifest key {other:?}"))),
            }
        }
        let config = config.ok_or_else(|| corrupt("manifest lacks config"))?;
        if hash.as_deref() != Some(config_hash(&config).as_str()) {
            return Err(corrupt("config hash mismatch"));
        }
        let missing = |k: &str| corrupt(format!("manifest lacks {k}"));
        Ok(Self {
            config,
            vocab_size: vocab_size.ok_or_else(|| missing("vocab_size"))?,
            epoch: epoch.ok_or_else(|| missing("epoch"))?,
            step: step.ok_or_else(|| missing("step"))?,
            adam_t: adam_t.ok_or_else(|| missing("adam_t"))?,
            best_val: best_val.ok_or_else(|| missing("best_val"))?,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        // write then rename so an interrupted save never clobbers a good file
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn tensors_of(&self, kind: TensorKind) -> impl Iterator<Item = &NamedTensor> {
        self.tensors.iter().filter(move |t| t.kind == kind)
    }
}
