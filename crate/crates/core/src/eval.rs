//! Localization metrics under the normal and assigned protocols.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{index_to_time, Dataset, Split};
use crate::model::{prepare_sample, Network, SpanPrediction};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reversed span ({0}, {1})")]
    ReversedSpan(f64, f64),
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Temporal intersection over union. Zero-length spans score 0 unless both
/// spans are identical.
pub fn iou(a: (f64, f64), b: (f64, f64)) -> Result<f64, EvalError> {
    for s in [a, b] {
        if s.0 > s.1 {
            return Err(EvalError::ReversedSpan(s.0, s.1));
        }
    }
    if a == b {
        return Ok(1.0);
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = a.1.max(b.1) - a.0.min(b.0);
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok(inter / union)
}

/// Text similarity in `[0, 1]`, symmetric, 1 on identical input.
pub trait SimilarityOracle: Sync {
    fn score(&self, a: &str, b: &str) -> f64;
}

/// Jaccard overlap of lowercase token sets.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenJaccard;

impl SimilarityOracle for TokenJaccard {
    fn score(&self, a: &str, b: &str) -> f64 {
        let set = |s: &str| s.split_whitespace().map(str::to_lowercase).collect::<BTreeSet<_>>();
        let (sa, sb) = (set(a), set(b));
        let union = sa.union(&sb).count();
        if union == 0 {
            return 1.0;
        }
        sa.intersection(&sb).count() as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Normal,
    Assigned,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Normal => "normal",
            Protocol::Assigned => "assigned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub protocol: Protocol,
    pub similarity_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 0.7, 0.9],
            protocol: Protocol::Normal,
            similarity_threshold: 0.8,
        }
    }
}

/// Ground-truth candidates for one sample: its own span plus the spans of
/// same-motion queries whose text is similar enough.
pub fn assign_false_negatives(
    ds: &Dataset,
    sample: usize,
    oracle: &dyn SimilarityOracle,
    threshold: f64,
) -> Vec<(f64, f64)> {
    let own = &ds.samples[sample];
    let mut out = vec![own.span];
    for (k, s) in ds.samples.iter().enumerate() {
        if k != sample && s.motion_id == own.motion_id && oracle.score(&own.text, &s.text) >= threshold {
            out.push(s.span);
        }
    }
    out
}

/// A Recall@1 moment for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample: usize,
    pub t_s: f64,
    pub t_e: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub mu: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub samples: usize,
    pub recall: Vec<RecallAt>,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    /// Per-sample IoU in prediction order.
    pub ious: Vec<f64>,
}

impl EvalReport {
    pub fn recall_at(&self, mu: f64) -> Option<f64> {
        self.recall.iter().find(|r| r.mu == mu).map(|r| r.percent)
    }

    /// Fixed-width table: one column per threshold, then mIoU.
    pub fn table(&self) -> String {
        let mut head = format!("{:<10}", "Protocol");
        let mut row = format!("{:<10}", self.protocol.as_str());
        for r in &self.recall {
            let _ = write!(head, "{:>9}", format!("IoU@{}", r.mu));
            let _ = write!(row, "{:>9.2}", r.percent);
        }
        let _ = write!(head, "{:>9}", "mIoU");
        let _ = write!(row, "{:>9.2}", 100.0 * self.miou);
        format!("{head}\n{row}\n")
    }
}

/// Per-sample IoU; under the assigned protocol the best over candidates.
pub fn sample_ious(
    preds: &[Prediction],
    ds: &Dataset,
    cfg: &EvalConfig,
    oracle: &dyn SimilarityOracle,
) -> Result<Vec<f64>, EvalError> {
    preds
        .par_iter()
        .map(|p| {
            let s = ds
                .samples
                .get(p.sample)
                .ok_or_else(|| EvalError::Mismatch(format!("prediction for unknown sample {}", p.sample)))?;
            let pred = (p.t_s, p.t_e);
            match cfg.protocol {
                Protocol::Normal => iou(pred, s.span),
                Protocol::Assigned => {
                    let mut best: f64 = 0.0;
                    for c in assign_false_negatives(ds, p.sample, oracle, cfg.similarity_threshold) {
                        best = best.max(iou(pred, c)?);
                    }
                    Ok(best)
                }
            }
        })
        .collect()
}

pub fn evaluate_protocol(
    preds: &[Prediction],
    ds: &Dataset,
    cfg: &EvalConfig,
    oracle: &dyn SimilarityOracle,
) -> Result<EvalReport, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Mismatch("no predictions".into()));
    }
    let ious = sample_ious(preds, ds, cfg, oracle)?;
    Ok(report_from_ious(ious, cfg))
}

pub fn report_from_ious(ious: Vec<f64>, cfg: &EvalConfig) -> EvalReport {
    let n = ious.len() as f64;
    let recall = cfg
        .thresholds
        .iter()
        .map(|&mu| RecallAt {
            mu,
            percent: 100.0 * ious.iter().filter(|&&v| v > mu).count() as f64 / n,
        })
        .collect();
    EvalReport {
        protocol: cfg.protocol,
        samples: ious.len(),
        recall,
        miou: ious.iter().sum::<f64>() / n,
        ious,
    }
}

/// Inference output for one dataset sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Located {
    pub prediction: Prediction,
    pub span: SpanPrediction,
    pub highlight: Vec<f64>,
    /// Ground-truth foreground mask on the snippet grid.
    pub foreground: Vec<bool>,
}

/// Runs label-free inference over samples in parallel.
pub fn locate_samples(net: &Network, ds: &Dataset, samples: &[usize]) -> Result<Vec<Located>, EvalError> {
    samples
        .par_iter()
        .map(|&k| {
            let prep = prepare_sample(ds, k, net.config.max_snippets)?;
            let (span, highlight) = net.infer(&prep)?;
            let t_s = index_to_time(span.start, prep.duration, prep.steps)?;
            let t_e = index_to_time(span.end, prep.duration, prep.steps)?;
            Ok(Located {
                prediction: Prediction {
                    sample: k,
                    t_s,
                    t_e,
                    score: span.score,
                },
                span,
                highlight,
                foreground: (0..prep.steps).map(|i| prep.i_s <= i && i <= prep.i_e).collect(),
            })
        })
        .collect()
}

/// Mean highlight score over foreground and background steps.
pub fn highlight_means(located: &[Located]) -> (f64, f64) {
    let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for l in located {
        for (&h, &f) in l.highlight.iter().zip(&l.foreground) {
            if f {
                fg += h;
                nf += 1;
            } else {
                bg += h;
                nb += 1;
            }
        }
    }
    (fg / nf.max(1) as f64, bg / nb.max(1) as f64)
}

/// Summary of one split under both protocols.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitEvaluation {
    pub split: Split,
    pub normal: EvalReport,
    pub assigned: EvalReport,
    pub highlight_foreground: f64,
    pub highlight_background: f64,
}

pub fn evaluate_split(
    net: &Network,
    ds: &Dataset,
    split: Split,
    cfg: &EvalConfig,
    oracle: &dyn SimilarityOracle,
) -> Result<SplitEvaluation, EvalError> {
    let samples = ds.split_indices(split);
    if samples.is_empty() {
        return Err(EvalError::Mismatch(format!("split {} is empty", split.as_str())));
    }
    let located = locate_samples(net, ds, &samples)?;
    let preds: Vec<Prediction> = located.iter().map(|l| l.prediction.clone()).collect();
    let normal_cfg = EvalConfig {
        protocol: Protocol::Normal,
        ..cfg.clone()
    };
    let assigned_cfg = EvalConfig {
        protocol: Protocol::Assigned,
        ..cfg.clone()
    };
    let (fg, bg) = highlight_means(&located);
    Ok(SplitEvaluation {
        split,
        normal: evaluate_protocol(&preds, ds, &normal_cfg, oracle)?,
        assigned: evaluate_protocol(&preds, ds, &assigned_cfg, oracle)?,
        highlight_foreground: fg,
        highlight_background: bg,
    })
}
