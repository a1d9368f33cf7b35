//! Corpus-level moment retrieval: chunked retrieval scores fused with the
//! localizer's span probability, plus DCG.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{index_to_time, DataError, Dataset, MotionSequence};
use crate::eval::{iou, EvalError, SimilarityOracle, TokenJaccard};
use crate::model::{prepare_query, Network};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum CmrError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid cmr config: {0}")]
    Config(String),
    #[error("DCG cutoff must be at least 1")]
    Cutoff,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmrConfig {
    /// Chunk length in seconds.
    pub chunk: f64,
    /// Fraction of a chunk shared with the next one.
    pub overlap: f64,
    pub k: usize,
    pub lambda: f64,
    pub cutoffs: Vec<usize>,
}

impl Default for CmrConfig {
    fn default() -> Self {
        Self {
            chunk: 10.0,
            overlap: 0.9,
            k: 100,
            lambda: 5.0,
            cutoffs: vec![10, 50, 100],
        }
    }
}

impl CmrConfig {
    pub fn validate(&self) -> Result<(), CmrError> {
        if !(self.chunk > 0.0 && self.chunk.is_finite()) {
            return Err(CmrError::Config("chunk length must be positive".into()));
        }
        if !(self.overlap > 0.0 && self.overlap < 1.0) {
            return Err(CmrError::Config("overlap must lie in (0, 1)".into()));
        }
        if self.k == 0 {
            return Err(CmrError::Config("k must be at least 1".into()));
        }
        if !self.lambda.is_finite() {
            return Err(CmrError::Config("lambda must be finite".into()));
        }
        if self.cutoffs.contains(&0) {
            return Err(CmrError::Cutoff);
        }
        Ok(())
    }

    pub fn stride(&self) -> f64 {
        (1.0 - self.overlap) * self.chunk
    }
}

/// Query-to-chunk similarity.
pub trait RetrievalProvider: Sync {
    fn similarity(&self, query: &str, motion: &str, chunk: (f64, f64)) -> f64;
}

/// Relevance in `[0, 1]` of a retrieved moment to the query.
pub trait RelevanceProvider: Sync {
    fn rel(&self, query: &str, motion: &str, moment: (f64, f64)) -> f64;
}

/// Localizes a query inside one motion.
pub trait Localizer: Sync {
    /// `(t_s, t_e, p_se)` of the best span.
    fn locate(&self, motion: &MotionSequence, tokens: &[usize]) -> Result<(f64, f64, f64), CmrError>;
}

impl Localizer for Network {
    fn locate(&self, motion: &MotionSequence, tokens: &[usize]) -> Result<(f64, f64, f64), CmrError> {
        let prep = prepare_query(motion, tokens, self.config.max_snippets)?;
        let (span, _) = self.infer(&prep)?;
        Ok((
            index_to_time(span.start, prep.duration, prep.steps)?,
            index_to_time(span.end, prep.duration, prep.steps)?,
            span.score,
        ))
    }
}

/// The annotated primitives of each motion, used as a stand-in for a
/// learned text-motion retrieval model.
#[derive(Debug, Clone, Default)]
pub struct PlantedPrimitives {
    by_motion: HashMap<String, Vec<(String, (f64, f64))>>,
}

impl PlantedPrimitives {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let mut by_motion: HashMap<String, Vec<(String, (f64, f64))>> = HashMap::new();
        for s in &ds.samples {
            by_motion.entry(s.motion_id.clone()).or_default().push((s.text.clone(), s.span));
        }
        Self { by_motion }
    }

    fn best(&self, query: &str, motion: &str, weight: impl Fn((f64, f64)) -> f64) -> f64 {
        self.by_motion
            .get(motion)
            .into_iter()
            .flatten()
            .map(|(text, span)| TokenJaccard.score(query, text) * weight(*span))
            .fold(0.0, f64::max)
    }
}

impl RetrievalProvider for PlantedPrimitives {
    /// Text match times the fraction of the primitive inside the chunk.
    fn similarity(&self, query: &str, motion: &str, chunk: (f64, f64)) -> f64 {
        self.best(query, motion, |(s, e)| {
            let inter = (e.min(chunk.1) - s.max(chunk.0)).max(0.0);
            if e > s {
                inter / (e - s)
            } else if chunk.0 <= s && s <= chunk.1 {
                1.0
            } else {
                0.0
            }
        })
    }
}

impl RelevanceProvider for PlantedPrimitives {
    /// Text match times temporal IoU with the primitive.
    fn rel(&self, query: &str, motion: &str, moment: (f64, f64)) -> f64 {
        self.best(query, motion, |span| iou(moment, span).unwrap_or(0.0))
    }
}

/// Sliding windows of `cfg.chunk` seconds; a motion shorter than one chunk
/// gets a single full-length window.
pub fn chunk_motion(duration: f64, cfg: &CmrConfig) -> Vec<(f64, f64)> {
    if duration <= cfg.chunk {
        return vec![(0.0, duration)];
    }
    let stride = cfg.stride();
    let mut out = Vec::new();
    let mut i = 0usize;
    loop {
        let start = i as f64 * stride;
        let end = start + cfg.chunk;
        // tolerate rounding in i·stride
        if end > duration + 1e-9 {
            break;
        }
        out.push((start, end.min(duration)));
        i += 1;
    }
    out
}

/// Maximum chunk similarity.
pub fn retrieval_score(query: &str, motion: &MotionSequence, provider: &dyn RetrievalProvider, cfg: &CmrConfig) -> f64 {
    chunk_motion(motion.duration, cfg)
        .into_iter()
        .map(|c| provider.similarity(query, &motion.id, c))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `p_se · exp(λ·r)`.
pub fn cmr_score(p_se: f64, r: f64, lambda: f64) -> f64 {
    p_se * (lambda * r).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedMoment {
    pub motion_id: String,
    pub t_s: f64,
    pub t_e: f64,
    pub cmr_score: f64,
    pub rel: f64,
    #[serde(skip)]
    pub retrieval: f64,
    #[serde(skip)]
    pub p_se: f64,
}

/// Orders by descending score, then motion id, then start time.
pub fn ranking_order(a: &RankedMoment, b: &RankedMoment) -> Ordering {
    b.cmr_score
        .total_cmp(&a.cmr_score)
        .then_with(|| a.motion_id.cmp(&b.motion_id))
        .then_with(|| a.t_s.total_cmp(&b.t_s))
}

/// Retrieves over every motion, localizes in the `k` best, and ranks one
/// moment per motion by fused score.
pub fn rank_corpus(
    query: &str,
    corpus: &Dataset,
    localizer: &dyn Localizer,
    retrieval: &dyn RetrievalProvider,
    relevance: &dyn RelevanceProvider,
    cfg: &CmrConfig,
) -> Result<Vec<RankedMoment>, CmrError> {
    cfg.validate()?;
    if corpus.motions.is_empty() {
        return Err(CmrError::EmptyCorpus);
    }
    let mut scored: Vec<(f64, &MotionSequence)> = corpus
        .motions
        .par_iter()
        .map(|m| (retrieval_score(query, m, retrieval, cfg), m))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    scored.truncate(cfg.k);

    let tokens = corpus.tokenize(query);
    let mut ranked = scored
        .par_iter()
        .map(|&(r, m)| {
            let (t_s, t_e, p_se) = localizer.locate(m, &tokens)?;
            Ok(RankedMoment {
                motion_id: m.id.clone(),
                t_s,
                t_e,
                cmr_score: cmr_score(p_se, r, cfg.lambda),
                rel: relevance.rel(query, &m.id, (t_s, t_e)),
                retrieval: r,
                p_se,
            })
        })
        .collect::<Result<Vec<_>, CmrError>>()?;
    ranked.sort_by(ranking_order);
    Ok(ranked)
}

/// `Σ_{i≤n} rel_i / log₂(i+1)`; positions past the list contribute 0.
pub fn dcg_at_n(rels: &[f64], n: usize) -> Result<f64, CmrError> {
    if n == 0 {
        return Err(CmrError::Cutoff);
    }
    Ok(rels
        .iter()
        .take(n)
        .enumerate()
        .map(|(i, r)| r / ((i + 2) as f64).log2())
        .sum())
}

pub fn ideal_dcg(n: usize) -> Result<f64, CmrError> {
    dcg_at_n(&vec![1.0; n], n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DcgSummary {
    pub n: usize,
    pub dcg: f64,
    pub ideal: f64,
}

pub fn dcg_summary(ranked: &[RankedMoment], cutoffs: &[usize]) -> Result<Vec<DcgSummary>, CmrError> {
    let rels: Vec<f64> = ranked.iter().map(|m| m.rel).collect();
    cutoffs
        .iter()
        .map(|&n| {
            Ok(DcgSummary {
                n,
                dcg: dcg_at_n(&rels, n)?,
                ideal: ideal_dcg(n)?,
            })
        })
        .collect()
}
