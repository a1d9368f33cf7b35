//! Newline-delimited JSON dataset files: one header record, then motion
//! records, then sample records.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, MotionSequence, QuerySample, Split, JOINTS, JOINT_FEATURES};

pub const FORMAT_TAG: &str = "tslm-ds";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    fps: f64,
    joints: usize,
    feat_dim: usize,
    vocab: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct MotionRecord {
    motion_id: String,
    duration: f64,
    features: Vec<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    motion_id: String,
    tokens: Vec<usize>,
    text: String,
    span: [f64; 2],
    split: Split,
}

pub fn write_dataset<W: Write>(ds: &Dataset, out: W) -> Result<(), DataError> {
    let mut w = BufWriter::new(out);
    let header = Header {
        format: FORMAT_TAG.to_string(),
        version: FORMAT_VERSION,
        fps: ds.fps,
        joints: JOINTS,
        feat_dim: JOINT_FEATURES,
        vocab: ds.vocab.clone(),
    };
    let json = |e: serde_json::Error| DataError::Invalid {
        what: "dataset".into(),
        msg: e.to_string(),
    };
    serde_json::to_writer(&mut w, &header).map_err(json)?;
    w.write_all(b"\n")?;
    for m in &ds.motions {
        let features = m
            .features
            .chunks(JOINTS * JOINT_FEATURES)
            .map(|frame| frame.chunks(JOINT_FEATURES).map(<[f64]>::to_vec).collect())
            .collect();
        let rec = MotionRecord {
            motion_id: m.id.clone(),
            duration: m.duration,
            features,
        };
        serde_json::to_writer(&mut w, &rec).map_err(json)?;
        w.write_all(b"\n")?;
    }
    for s in &ds.samples {
        let rec = SampleRecord {
            motion_id: s.motion_id.clone(),
            tokens: s.token_ids.clone(),
            text: s.text.clone(),
            span: [s.span.0, s.span.1],
            split: s.split,
        };
        serde_json::to_writer(&mut w, &rec).map_err(json)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    write_dataset(ds, File::create(path)?)
}

pub fn read_dataset<R: Read>(input: R) -> Result<Dataset, DataError> {
    let reader = BufReader::new(input);
    let mut lines = reader.lines().enumerate().filter(|(_, l)| match l {
        Ok(l) => !l.trim().is_empty(),
        Err(_) => true,
    });
    let parse_err = |record: usize, e: &dyn std::fmt::Display| DataError::Parse {
        record,
        msg: e.to_string(),
    };

    let Some((_, first)) = lines.next() else {
        return Err(DataError::Parse {
            record: 0,
            msg: "missing header".into(),
        });
    };
    let header: Header = serde_json::from_str(&first?).map_err(|e| parse_err(0, &e))?;
    if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
        return Err(DataError::Version {
            format: header.format,
            version: header.version,
        });
    }
    if header.joints != JOINTS || header.feat_dim != JOINT_FEATURES {
        return Err(parse_err(
            0,
            &format!("joint grid {}x{} unsupported", header.joints, header.feat_dim),
        ));
    }

    let mut ds = Dataset {
        fps: header.fps,
        vocab: header.vocab,
        motions: Vec::new(),
        samples: Vec::new(),
    };
    for (record, line) in lines {
        let line = line?;
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| parse_err(record, &e))?;
        if value.get("features").is_some() {
            let rec: MotionRecord = serde_json::from_value(value).map_err(|e| parse_err(record, &e))?;
            let frames = rec.features.len();
            let mut features = Vec::with_capacity(frames * JOINTS * JOINT_FEATURES);
            for (f, frame) in rec.features.iter().enumerate() {
                if frame.len() != JOINTS || frame.iter().any(|j| j.len() != JOINT_FEATURES) {
                    return Err(parse_err(record, &format!("frame {f} is not {JOINTS}x{JOINT_FEATURES}")));
                }
                for joint in frame {
                    features.extend_from_slice(joint);
                }
            }
            let motion = MotionSequence {
                id: rec.motion_id,
                duration: rec.duration,
                fps: ds.fps,
                frames,
                features,
            };
            motion.validate().map_err(|e| parse_err(record, &e))?;
            ds.motions.push(motion);
        } else if value.get("tokens").is_some() {
            let rec: SampleRecord = serde_json::from_value(value).map_err(|e| parse_err(record, &e))?;
            ds.samples.push(QuerySample {
                motion_id: rec.motion_id,
                token_ids: rec.tokens,
                text: rec.text,
                span: (rec.span[0], rec.span[1]),
                split: rec.split,
            });
        } else {
            return Err(parse_err(record, &"neither a motion nor a sample record"));
        }
    }
    ds.validate()?;
    Ok(ds)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    read_dataset(File::open(path)?)
}
