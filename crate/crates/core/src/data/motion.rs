use serde::{Deserialize, Serialize};

use super::DataError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const JOINTS: usize = 22;
pub const JOINT_FEATURES: usize = 12;
pub const RAW_POSE_DIM: usize = 263;
pub const DEFAULT_FPS: f64 = 20.0;

/// Untrimmed motion as per-frame joint features `[F × 22 × 12]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub id: String,
    pub duration: f64,
    pub fps: f64,
    pub frames: usize,
    /// Row-major `[frames][JOINTS][JOINT_FEATURES]`.
    pub features: Vec<f64>,
}

impl MotionSequence {
    pub fn frame_width() -> usize {
        JOINTS * JOINT_FEATURES
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| DataError::Invalid {
            what: format!("motion {}", self.id),
            msg,
        };
        if self.frames == 0 {
            return Err(bad("no frames".into()));
        }
        if self.features.len() != self.frames * Self::frame_width() {
            return Err(bad(format!(
                "{} feature values for {} frames",
                self.features.len(),
                self.frames
            )));
        }
        if !(self.duration > 0.0) || !(self.fps > 0.0) {
            return Err(bad("duration and fps must be positive".into()));
        }
        let expected = round_half_up(self.duration * self.fps) as i64;
        if (expected - self.frames as i64).abs() > 1 {
            return Err(bad(format!(
                "frame count {} inconsistent with duration {} at {} fps",
                self.frames, self.duration, self.fps
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite feature".into()));
        }
        Ok(())
    }

    /// Features as a `[F × 264]` tensor.
    pub fn frame_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::new(
            vec![self.frames, Self::frame_width()],
            self.features.iter().map(|&v| S::lit(v)).collect(),
        )
        .expect("validated motion")
    }
}

/// Raw pose sequence in the 263-channel layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPoseSequence {
    pub frames: usize,
    pub data: Vec<f64>,
}

impl RawPoseSequence {
    pub fn new(frames: usize, data: Vec<f64>) -> Result<Self, DataError> {
        if data.len() != frames * RAW_POSE_DIM {
            return Err(DataError::Invalid {
                what: "raw pose sequence".into(),
                msg: format!("{} values for {frames} frames of {RAW_POSE_DIM}", data.len()),
            });
        }
        Ok(Self { frames, data })
    }
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Maps a time in seconds to a snippet index: round-half-up of `t/D·T`,
/// clamped into `[0, T−1]`.
pub fn time_to_index(t: f64, duration: f64, snippets: usize) -> Result<usize, DataError> {
    if snippets == 0 || !(duration > 0.0) {
        return Err(DataError::Range {
            what: "time_to_index",
            value: duration,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    if !(0.0..=duration).contains(&t) {
        return Err(DataError::Range {
            what: "time_to_index",
            value: t,
            lo: 0.0,
            hi: duration,
        });
    }
    let raw = round_half_up(t / duration * snippets as f64) as usize;
    Ok(raw.min(snippets - 1))
}

/// Start time of snippet `i`: `i/T·D`.
pub fn index_to_time(i: usize, duration: f64, snippets: usize) -> Result<f64, DataError> {
    if i >= snippets {
        return Err(DataError::Range {
            what: "index_to_time",
            value: i as f64,
            lo: 0.0,
            hi: snippets as f64 - 1.0,
        });
    }
    Ok(i as f64 / snippets as f64 * duration)
}

/// Averages frames into `T = min(F, S)` snippets. Bin `k` spans frames
/// `⌊kF/T⌋ .. ⌊(k+1)F/T⌋`.
pub fn snippetize<S: Scalar>(frames: &Tensor<S>, max_snippets: usize) -> Result<Tensor<S>, DataError> {
    let f = frames.rows();
    if frames.is_empty() || f == 0 || max_snippets == 0 {
        return Err(DataError::Invalid {
            what: "snippetize".into(),
            msg: "empty motion".into(),
        });
    }
    if f <= max_snippets {
        return Ok(frames.clone());
    }
    let t = max_snippets;
    let d = frames.cols();
    let mut out = vec![S::zero(); t * d];
    for k in 0..t {
        let lo = k * f / t;
        let hi = (k + 1) * f / t;
        let row = &mut out[k * d..(k + 1) * d];
        for fr in lo..hi {
            for (o, &v) in row.iter_mut().zip(frames.row(fr)) {
                *o += v;
            }
        }
        let n = S::from_usize_lossy(hi - lo);
        for o in row.iter_mut() {
            *o /= n;
        }
    }
    Ok(Tensor::new(vec![t, d], out).expect("snippet shape"))
}

/// Position of one joint feature slot in the 263-channel raw pose vector.
/// `None` leaves the slot at zero.
pub type SlotSource = Option<usize>;

/// Table mapping `(joint, slot)` to raw pose channels. Slots are
/// position (0..3), 6-D rotation (3..9) and velocity (9..12).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLayout {
    pub raw_dim: usize,
    pub slots: Vec<[SlotSource; JOINT_FEATURES]>,
}

impl JointLayout {
    /// Conventional ordering of the 263-dim pose: root angular velocity (1),
    /// root linear velocity xz (2), root height (1), 21 local joint
    /// positions (63), 21 6-D joint rotations (126), 22 joint velocities
    /// (66), 4 foot contacts. Foot contacts are not mapped.
    pub fn conventional() -> Self {
        let mut slots = Vec::with_capacity(JOINTS);
        for j in 0..JOINTS {
            let mut s: [SlotSource; JOINT_FEATURES] = [None; JOINT_FEATURES];
            if j == 0 {
                s[0] = Some(1);
                s[1] = Some(3);
                s[2] = Some(2);
                s[3] = Some(0);
            } else {
                let pos = 4 + 3 * (j - 1);
                let rot = 67 + 6 * (j - 1);
                for k in 0..3 {
                    s[k] = Some(pos + k);
                }
                for k in 0..6 {
                    s[3 + k] = Some(rot + k);
                }
            }
            let vel = 193 + 3 * j;
            for k in 0..3 {
                s[9 + k] = Some(vel + k);
            }
            slots.push(s);
        }
        Self {
            raw_dim: RAW_POSE_DIM,
            slots,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| DataError::Invalid {
            what: "joint layout".into(),
            msg,
        };
        if self.raw_dim != RAW_POSE_DIM {
            return Err(bad(format!("raw dimension {} is not {RAW_POSE_DIM}", self.raw_dim)));
        }
        if self.slots.len() != JOINTS {
            return Err(bad(format!("{} joints, expected {JOINTS}", self.slots.len())));
        }
        let mut used = vec![false; self.raw_dim];
        for (j, row) in self.slots.iter().enumerate() {
            for src in row.iter().flatten() {
                if *src >= self.raw_dim {
                    return Err(bad(format!("joint {j} reads channel {src} beyond {}", self.raw_dim)));
                }
                if std::mem::replace(&mut used[*src], true) {
                    return Err(bad(format!("channel {src} mapped twice")));
                }
            }
        }
        Ok(())
    }

    /// Writes a joint grid back into raw channels (unmapped channels zero).
    pub fn scatter(&self, joints: &[f64]) -> Vec<f64> {
        let mut raw = vec![0.0; self.raw_dim];
        for (j, row) in self.slots.iter().enumerate() {
            for (k, src) in row.iter().enumerate() {
                if let Some(c) = src {
                    raw[*c] = joints[j * JOINT_FEATURES + k];
                }
            }
        }
        raw
    }

    fn gather(&self, raw: &[f64], out: &mut [f64]) {
        for (j, row) in self.slots.iter().enumerate() {
            for (k, src) in row.iter().enumerate() {
                out[j * JOINT_FEATURES + k] = src.map_or(0.0, |c| raw[c]);
            }
        }
    }
}

/// Reshapes raw 263-dim poses into the `22 × 12` joint grid, dropping the
/// channels the layout does not map (foot contacts).
pub fn recover_joints(
    id: &str,
    raw: &RawPoseSequence,
    layout: &JointLayout,
    fps: f64,
) -> Result<MotionSequence, DataError> {
    layout.validate()?;
    let width = MotionSequence::frame_width();
    let mut features = vec![0.0; raw.frames * width];
    for f in 0..raw.frames {
        layout.gather(
            &raw.data[f * RAW_POSE_DIM..(f + 1) * RAW_POSE_DIM],
            &mut features[f * width..(f + 1) * width],
        );
    }
    Ok(MotionSequence {
        id: id.to_string(),
        duration: raw.frames as f64 / fps,
        fps,
        frames: raw.frames,
        features,
    })
}

/// Binary skeleton adjacency with self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    pub adjacency: Tensor<f64>,
}

/// Parent of each joint in the 22-joint kinematic tree (root has none).
pub const KINEMATIC_PARENTS: [Option<usize>; JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
];

impl SkeletonGraph {
    pub fn from_parents(parents: &[Option<usize>]) -> Self {
        let j = parents.len();
        let mut a = Tensor::zeros(&[j, j]);
        for (child, parent) in parents.iter().enumerate() {
            a.set(child, child, 1.0);
            if let Some(p) = parent {
                a.set(child, *p, 1.0);
                a.set(*p, child, 1.0);
            }
        }
        Self { adjacency: a }
    }

    pub fn human22() -> Self {
        Self::from_parents(&KINEMATIC_PARENTS)
    }

    pub fn joints(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.joints();
        if n == 0 {
            return false;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for k in 0..n {
                if self.adjacency.at(i, k) != 0.0 && !seen[k] {
                    seen[k] = true;
                    stack.push(k);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn time_to_index_examples() {
        assert_eq!(time_to_index(2.5, 10.0, 256).unwrap(), 64);
        assert_eq!(time_to_index(1.0, 3.0, 256).unwrap(), 85);
        assert_eq!(time_to_index(10.0, 10.0, 256).unwrap(), 255);
        assert!(time_to_index(10.5, 10.0, 256).is_err());
        assert!(time_to_index(-0.1, 10.0, 256).is_err());
    }

    #[test]
    fn index_to_time_examples() {
        assert_eq!(index_to_time(0, 10.0, 256).unwrap(), 0.0);
        assert_eq!(index_to_time(64, 10.0, 256).unwrap(), 2.5);
        assert!(index_to_time(256, 10.0, 256).is_err());
    }

    proptest! {
        #[test]
        fn index_roundtrip_within_one_snippet(frac in 0.0f64..=1.0, d in 0.5f64..100.0, t_count in 1usize..300) {
            let t = frac * d;
            let i = time_to_index(t, d, t_count).unwrap();
            let back = index_to_time(i, d, t_count).unwrap();
            prop_assert!((back - t).abs() <= d / t_count as f64 + 1e-9);
        }

        #[test]
        fn snippetize_preserves_global_mean(f in 1usize..200, s in 1usize..64, seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, &[]);
            let data: Vec<f64> = (0..f * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let frames = Tensor::new(vec![f, 3], data).unwrap();
            let out = snippetize(&frames, s).unwrap();
            prop_assert_eq!(out.rows(), f.min(s));
            let mean_in = frames.sum() / (f * 3) as f64;
            let mean_out = out.sum() / (out.rows() * 3) as f64;
            // only equal-sized bins preserve the mean exactly
            if f <= s || f % s == 0 {
                prop_assert!((mean_in - mean_out).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn snippetize_examples() {
        let frames = Tensor::new(vec![10, 2], (0..20).map(|v| v as f64).collect()).unwrap();
        assert_eq!(snippetize(&frames, 256).unwrap(), frames);

        let frames = Tensor::new(vec![512, 1], (0..512).map(|v| v as f64).collect()).unwrap();
        let out = snippetize(&frames, 256).unwrap();
        assert_eq!(out.rows(), 256);
        for k in 0..256 {
            assert_eq!(out.data()[k], (2 * k) as f64 + 0.5);
        }

        let frames = Tensor::<f64>::from_f64_rows(&[&[1.5, -2.0], &[1.5, -2.0], &[1.5, -2.0]]).unwrap();
        let out = snippetize(&frames, 2).unwrap();
        assert_eq!(out, Tensor::from_f64_rows(&[&[1.5, -2.0], &[1.5, -2.0]]).unwrap());
    }

    #[test]
    fn snippetize_rejects_empty() {
        assert!(snippetize(&Tensor::<f64>::zeros(&[0, 3]), 4).is_err());
    }

    #[test]
    fn conventional_layout_is_valid() {
        JointLayout::conventional().validate().unwrap();
    }

    #[test]
    fn zero_raw_frame_gives_zero_grid() {
        let raw = RawPoseSequence::new(2, vec![0.0; 2 * RAW_POSE_DIM]).unwrap();
        let m = recover_joints("m", &raw, &JointLayout::conventional(), 20.0).unwrap();
        assert!(m.features.iter().all(|&v| v == 0.0));
        assert_eq!(m.features.len(), 2 * JOINTS * JOINT_FEATURES);
    }

    #[test]
    fn scatter_then_gather_reproduces_mapped_slots() {
        let layout = JointLayout::conventional();
        let grid: Vec<f64> = (0..JOINTS * JOINT_FEATURES).map(|v| v as f64 + 1.0).collect();
        let raw = RawPoseSequence::new(1, layout.scatter(&grid)).unwrap();
        let m = recover_joints("m", &raw, &layout, 20.0).unwrap();
        for (j, row) in layout.slots.iter().enumerate() {
            for (k, src) in row.iter().enumerate() {
                let v = m.features[j * JOINT_FEATURES + k];
                if src.is_some() {
                    assert_eq!(v, grid[j * JOINT_FEATURES + k]);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn known_channels_land_in_declared_slots() {
        let mut raw = vec![0.0; RAW_POSE_DIM];
        raw[3] = 0.9; // root height
        raw[4 + 3 * 4 + 1] = 7.0; // joint 5 position y
        raw[67 + 6 * 20 + 5] = -3.0; // joint 21 rotation, last component
        raw[193 + 3 * 10 + 2] = 2.5; // joint 10 velocity z
        raw[260] = 99.0; // foot contact, dropped
        let m = recover_joints("m", &RawPoseSequence::new(1, raw).unwrap(), &JointLayout::conventional(), 20.0)
            .unwrap();
        let at = |j: usize, k: usize| m.features[j * JOINT_FEATURES + k];
        assert_eq!(at(0, 1), 0.9);
        assert_eq!(at(5, 1), 7.0);
        assert_eq!(at(21, 8), -3.0);
        assert_eq!(at(10, 11), 2.5);
        assert!(!m.features.contains(&99.0));
    }

    #[test]
    fn inconsistent_layout_rejected() {
        let mut layout = JointLayout::conventional();
        layout.raw_dim = 251;
        assert!(layout.validate().is_err());
        let mut layout = JointLayout::conventional();
        layout.slots[3][0] = Some(400);
        assert!(layout.validate().is_err());
    }

    #[test]
    fn skeleton_is_symmetric_connected_with_self_loops() {
        let g = SkeletonGraph::human22();
        assert_eq!(g.joints(), JOINTS);
        assert!(g.is_connected());
        for i in 0..JOINTS {
            assert_eq!(g.adjacency.at(i, i), 1.0);
            for k in 0..JOINTS {
                assert_eq!(g.adjacency.at(i, k), g.adjacency.at(k, i));
            }
        }
    }
}
