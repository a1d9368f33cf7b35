//! Procedural benchmark: each motion is a concatenation of sinusoidal
//! action primitives rendered directly into the 22×12 joint grid, and each
//! primitive yields one query naming its action and tempo.

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, MotionSequence, QuerySample, Split, DEFAULT_FPS, JOINTS, JOINT_FEATURES};
use crate::rng::{stream, tag};

/// One action type: which joints move, along which axis, how fast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveKind {
    pub phrase: String,
    pub joints: Vec<usize>,
    pub axis: usize,
    pub frequency: f64,
    pub amplitude: f64,
}

impl PrimitiveKind {
    fn new(phrase: &str, joints: &[usize], axis: usize, frequency: f64, amplitude: f64) -> Self {
        Self {
            phrase: phrase.to_string(),
            joints: joints.to_vec(),
            axis,
            frequency,
            amplitude,
        }
    }
}

/// Tempo words and their frequency multipliers.
pub const TEMPOS: [(&str, f64); 2] = [("slowly", 0.6), ("quickly", 1.7)];

pub fn default_library() -> Vec<PrimitiveKind> {
    const LEGS: [usize; 8] = [1, 4, 7, 10, 2, 5, 8, 11];
    vec![
        PrimitiveKind::new("walks forward", &LEGS, 2, 1.0, 0.3),
        PrimitiveKind::new("jumps up", &[0, 3, 6, 9, 1, 2, 4, 5], 1, 1.4, 0.4),
        PrimitiveKind::new("waves the right hand", &[14, 17, 19, 21], 0, 2.0, 0.35),
        PrimitiveKind::new("waves the left hand", &[13, 16, 18, 20], 0, 2.0, 0.35),
        PrimitiveKind::new("kicks with the right leg", &[2, 5, 8, 11], 2, 0.8, 0.5),
        PrimitiveKind::new("kicks with the left leg", &[1, 4, 7, 10], 2, 0.8, 0.5),
        PrimitiveKind::new("squats down", &[0, 1, 2, 4, 5], 1, 0.5, 0.3),
        PrimitiveKind::new("turns around", &[0, 3, 6, 9, 12, 15], 0, 0.4, 0.5),
        PrimitiveKind::new("raises both arms", &[16, 17, 18, 19, 20, 21], 1, 0.6, 0.4),
        PrimitiveKind::new("bends over", &[3, 6, 9, 12, 15], 2, 0.5, 0.4),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub fps: f64,
    pub primitives_per_motion: (usize, usize),
    /// Duration range of one primitive in seconds.
    pub primitive_seconds: (f64, f64),
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    /// Half-width of the uniform feature noise.
    pub noise: f64,
    /// Chance that a primitive repeats an action already used in the motion.
    pub repeat_probability: f64,
    pub library: Vec<PrimitiveKind>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            fps: DEFAULT_FPS,
            primitives_per_motion: (3, 8),
            primitive_seconds: (1.5, 4.0),
            train_samples: 500,
            val_samples: 50,
            test_samples: 100,
            noise: 0.02,
            repeat_probability: 0.1,
            library: default_library(),
        }
    }
}

const PREFIX: [&str; 2] = ["a", "person"];

/// Vocabulary: `<unk>` followed by every generator word in sorted order.
pub fn build_vocab(library: &[PrimitiveKind]) -> Vec<String> {
    let mut words: BTreeSet<String> = PREFIX.iter().map(|w| w.to_string()).collect();
    for kind in library {
        words.extend(kind.phrase.split_whitespace().map(str::to_lowercase));
    }
    words.extend(TEMPOS.iter().map(|(w, _)| w.to_string()));
    std::iter::once("<unk>".to_string()).chain(words).collect()
}

fn describe(kind: &PrimitiveKind, tempo: Option<usize>) -> String {
    let mut text = format!("{} {}", PREFIX.join(" "), kind.phrase);
    if let Some(t) = tempo {
        text.push(' ');
        text.push_str(TEMPOS[t].0);
    }
    text
}

/// Recovers `(library index, tempo)` from a token sequence.
pub fn decode_primitive(tokens: &[usize], vocab: &[String], library: &[PrimitiveKind]) -> Option<(usize, Option<usize>)> {
    let words: Vec<&str> = tokens.iter().map(|&t| vocab.get(t).map_or("", String::as_str)).collect();
    let text = words.join(" ");
    let tempo = TEMPOS.iter().position(|(w, _)| words.contains(w));
    let mut best: Option<(usize, usize)> = None;
    for (k, kind) in library.iter().enumerate() {
        let phrase = format!(" {} ", kind.phrase);
        if format!(" {text} ").contains(&phrase) && best.map_or(true, |(_, len)| kind.phrase.len() > len) {
            best = Some((k, kind.phrase.len()));
        }
    }
    best.map(|(k, _)| (k, tempo))
}

struct Planned {
    kind: usize,
    tempo: Option<usize>,
    frames: usize,
}

fn plan_motion(cfg: &GeneratorConfig, rng: &mut impl Rng, count: usize) -> Vec<Planned> {
    let mut order: Vec<usize> = (0..cfg.library.len()).collect();
    order.shuffle(rng);
    let mut used: Vec<usize> = Vec::new();
    let mut fresh = order.into_iter();
    (0..count)
        .map(|_| {
            let kind = if !used.is_empty() && rng.gen_bool(cfg.repeat_probability) {
                *used.choose(rng).expect("non-empty")
            } else {
                fresh.next().unwrap_or_else(|| rng.gen_range(0..cfg.library.len()))
            };
            used.push(kind);
            let tempo = match rng.gen_range(0..3) {
                0 => None,
                t => Some(t - 1),
            };
            let secs = rng.gen_range(cfg.primitive_seconds.0..=cfg.primitive_seconds.1);
            let frames = ((secs * cfg.fps).round() as usize).max(1);
            Planned { kind, tempo, frames }
        })
        .collect()
}

fn rest_position(j: usize) -> [f64; 3] {
    let jf = j as f64;
    [0.1 * jf.sin(), 0.05 * jf, 0.1 * jf.cos()]
}

fn render_motion(cfg: &GeneratorConfig, plan: &[Planned], rng: &mut impl Rng) -> Vec<f64> {
    let total: usize = plan.iter().map(|p| p.frames).sum();
    let width = JOINTS * JOINT_FEATURES;
    let mut feats = vec![0.0; total * width];
    let mut prev_pos = vec![[0.0f64; 3]; JOINTS];
    let mut frame = 0;
    for (pi, p) in plan.iter().enumerate() {
        let kind = &cfg.library[p.kind];
        let speed = p.tempo.map_or(1.0, |t| TEMPOS[t].1);
        let freq = kind.frequency * speed;
        let phases: Vec<f64> = (0..JOINTS).map(|_| rng.gen_range(0.0..TAU)).collect();
        for local in 0..p.frames {
            let tau = local as f64 / cfg.fps;
            let global = frame as f64 / cfg.fps;
            for j in 0..JOINTS {
                let mut disp = [0.0; 3];
                // idle sway everywhere
                disp[1] += 0.02 * (TAU * 0.3 * global + j as f64).sin();
                if kind.joints.contains(&j) {
                    let s = (TAU * freq * tau + phases[j]).sin();
                    let c = (TAU * freq * tau + phases[j]).cos();
                    disp[kind.axis] += kind.amplitude * s;
                    disp[(kind.axis + 1) % 3] += 0.5 * kind.amplitude * c;
                }
                let rest = rest_position(j);
                let pos = [rest[0] + disp[0], rest[1] + disp[1], rest[2] + disp[2]];
                let angle = disp[kind.axis] * 2.0;
                let rot = [angle.cos(), angle.sin(), 0.0, -angle.sin(), angle.cos(), 0.0];
                let vel = if frame == 0 && pi == 0 {
                    [0.0; 3]
                } else {
                    [
                        (pos[0] - prev_pos[j][0]) * cfg.fps * 0.1,
                        (pos[1] - prev_pos[j][1]) * cfg.fps * 0.1,
                        (pos[2] - prev_pos[j][2]) * cfg.fps * 0.1,
                    ]
                };
                prev_pos[j] = pos;
                let base = frame * width + j * JOINT_FEATURES;
                let slots = pos.iter().chain(rot.iter()).chain(vel.iter());
                for (k, &v) in slots.enumerate() {
                    let noise = if cfg.noise > 0.0 {
                        rng.gen_range(-cfg.noise..cfg.noise)
                    } else {
                        0.0
                    };
                    feats[base + k] = v + noise;
                }
            }
            frame += 1;
        }
    }
    feats
}

/// Generates a deterministic dataset. Each split holds exactly the
/// configured number of queries; motions never span two splits.
pub fn generate_synthetic_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset, DataError> {
    if cfg.library.is_empty() {
        return Err(DataError::Invalid {
            what: "generator".into(),
            msg: "empty primitive library".into(),
        });
    }
    let (lo, hi) = cfg.primitives_per_motion;
    if lo == 0 || lo > hi || !(cfg.primitive_seconds.0 > 0.0) || cfg.primitive_seconds.0 > cfg.primitive_seconds.1 {
        return Err(DataError::Invalid {
            what: "generator".into(),
            msg: "invalid primitive count or duration range".into(),
        });
    }
    for kind in &cfg.library {
        if kind.axis > 2 || kind.joints.iter().any(|&j| j >= JOINTS) {
            return Err(DataError::Invalid {
                what: "generator".into(),
                msg: format!("primitive {:?} references an invalid joint or axis", kind.phrase),
            });
        }
    }
    let vocab = build_vocab(&cfg.library);
    let lookup = |w: &str| vocab.iter().position(|v| v == w).unwrap_or(0);

    let mut motions = Vec::new();
    let mut samples = Vec::new();
    for (split_id, (split, target)) in [
        (Split::Train, cfg.train_samples),
        (Split::Val, cfg.val_samples),
        (Split::Test, cfg.test_samples),
    ]
    .into_iter()
    .enumerate()
    {
        let mut plan_rng = stream(seed, &[tag::PLAN, split_id as u64]);
        let mut counts = Vec::new();
        let mut covered = 0;
        while covered < target {
            let n = plan_rng.gen_range(lo..=hi);
            counts.push(n);
            covered += n;
        }
        let rendered: Vec<(MotionSequence, Vec<QuerySample>)> = counts
            .par_iter()
            .enumerate()
            .map(|(mi, &count)| {
                let mut rng = stream(seed, &[tag::MOTION, split_id as u64, mi as u64]);
                let plan = plan_motion(cfg, &mut rng, count);
                let features = render_motion(cfg, &plan, &mut rng);
                let frames: usize = plan.iter().map(|p| p.frames).sum();
                let id = format!("{}_{mi:04}", split.as_str());
                let mut start = 0;
                let queries = plan
                    .iter()
                    .map(|p| {
                        let text = describe(&cfg.library[p.kind], p.tempo);
                        let token_ids = text.split_whitespace().map(lookup).collect();
                        let span = (start as f64 / cfg.fps, (start + p.frames) as f64 / cfg.fps);
                        start += p.frames;
                        QuerySample {
                            motion_id: id.clone(),
                            token_ids,
                            text,
                            span,
                            split,
                        }
                    })
                    .collect();
                let motion = MotionSequence {
                    id,
                    duration: frames as f64 / cfg.fps,
                    fps: cfg.fps,
                    frames,
                    features,
                };
                (motion, queries)
            })
            .collect();
        let mut remaining = target;
        for (motion, queries) in rendered {
            let take = queries.len().min(remaining);
            remaining -= take;
            samples.extend(queries.into_iter().take(take));
            motions.push(motion);
        }
    }
    let ds = Dataset {
        fps: cfg.fps,
        vocab,
        motions,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}
