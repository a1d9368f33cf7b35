//! Foreground/background highlighting with label-prior embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sinusoidal_positions, Ctx, Init, Linear, ParamId, Result};
use crate::autodiff::Var;
use crate::tensor::TensorError;
use crate::Tensor;

pub const FOREGROUND: usize = 0;
pub const BACKGROUND: usize = 1;
pub const PAD: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Matcher {
    /// Rows: foreground, background, PAD.
    pub labels: ParamId,
    /// Kernel-1 convolution `d → 1`.
    pub conv: Linear,
}

impl Matcher {
    pub(crate) fn init<R: Rng>(init: &mut Init<'_, R>, d: usize) -> Self {
        Self {
            labels: init.uniform("matcher.labels".into(), &[3, d], 1.0 / (d as f64).sqrt()),
            conv: init.linear("matcher.conv", d, 1),
        }
    }
}

/// What the matcher sees in the label channel.
#[derive(Debug, Clone, Copy)]
pub enum LabelPrior<'a> {
    /// Inference: every step carries the PAD embedding.
    Pad,
    /// Training: ground-truth labels with the masked run replaced by PAD.
    Perturbed { highlight: &'a [bool], mask: &'a [bool] },
}

/// Linear ramp of the perturb rate from 0 to `alpha_max` over
/// `warmup_steps`, then constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSchedule {
    pub alpha_max: f64,
    pub warmup_steps: u64,
}

impl PerturbSchedule {
    pub fn alpha(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.alpha_max
        } else {
            self.alpha_max * step as f64 / self.warmup_steps as f64
        }
    }
}

/// `Y_h[i] = 1` iff `i_s ≤ i ≤ i_e`.
pub fn highlight_labels(i_s: usize, i_e: usize, t: usize) -> Vec<bool> {
    (0..t).map(|i| i_s <= i && i <= i_e).collect()
}

/// Row `i` is the foreground embedding when `y_h[i]`, else background.
pub fn build_label_embeddings(y_h: &[bool], table: &Tensor) -> Tensor {
    let d = table.cols();
    let mut data = Vec::with_capacity(y_h.len() * d);
    for &fg in y_h {
        data.extend_from_slice(table.row(if fg { FOREGROUND } else { BACKGROUND }));
    }
    Tensor::new(vec![y_h.len(), d], data).expect("label rows")
}

/// Exactly `round(α·T)` ones in one contiguous run at a uniform start.
pub fn perturbation_mask(t: usize, alpha: f64, rng: &mut impl Rng) -> Vec<bool> {
    let k = ((alpha.clamp(0.0, 1.0) * t as f64).round() as usize).min(t);
    let mut mask = vec![false; t];
    if k == 0 {
        return mask;
    }
    let start = rng.gen_range(0..=t - k);
    mask[start..start + k].fill(true);
    mask
}

/// `Ē = mask ⊙ E_pad + (1 − mask) ⊙ E`.
pub fn perturb_embeddings(e: &Tensor, mask: &[bool], pad_row: &[f64]) -> Result<Tensor> {
    if mask.len() != e.rows() || pad_row.len() != e.cols() {
        return Err(TensorError::ShapeMismatch {
            op: "perturb_embeddings",
            left: e.shape().to_vec(),
            right: vec![mask.len(), pad_row.len()],
        });
    }
    let mut out = e.clone();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            out.row_mut(i).copy_from_slice(pad_row);
        }
    }
    Ok(out)
}

fn label_rows(prior: LabelPrior<'_>, t: usize) -> Result<Vec<usize>> {
    match prior {
        LabelPrior::Pad => Ok(vec![PAD; t]),
        LabelPrior::Perturbed { highlight, mask } => {
            if highlight.len() != t || mask.len() != t {
                return Err(TensorError::ShapeMismatch {
                    op: "highlight_scores",
                    left: vec![t],
                    right: vec![highlight.len(), mask.len()],
                });
            }
            Ok(highlight
                .iter()
                .zip(mask)
                .map(|(&fg, &m)| match (m, fg) {
                    (true, _) => PAD,
                    (false, true) => FOREGROUND,
                    (false, false) => BACKGROUND,
                })
                .collect())
        }
    }
}

/// `S_LP = σ(Conv1D(M̄^q + E + E_pos))`, one score per step.
pub fn highlight_scores(cx: &mut Ctx<'_>, m: &Matcher, mq: Var, prior: LabelPrior<'_>) -> Result<Var> {
    let (t, d) = cx.tape.value(mq).expect_rank2("highlight_scores")?;
    let rows = label_rows(prior, t)?;
    let table = cx.p(m.labels);
    let emb = cx.tape.gather(table, &rows)?;
    let pe = cx.constant(sinusoidal_positions(t, d));
    let x = cx.tape.add(mq, emb)?;
    let x = cx.tape.add(x, pe)?;
    let logits = m.conv.forward(cx, x)?;
    let logits = cx.tape.reshape(logits, &[t])?;
    Ok(cx.tape.sigmoid(logits))
}

/// Mean binary cross-entropy of the scores against `Y_h`.
pub fn seq_loss(cx: &mut Ctx<'_>, scores: Var, y_h: &[bool]) -> Result<Var> {
    let target: Vec<f64> = y_h.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    cx.tape.bce(scores, &target)
}

/// `M̃^q = S_LP · M̄^q`, scaling each step.
pub fn apply_highlight(cx: &mut Ctx<'_>, scores: Var, mq: Var) -> Result<Var> {
    cx.tape.mul_col(mq, scores)
}
