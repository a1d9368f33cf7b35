//! The assembled network: sample preparation, the per-sample forward pass,
//! batched gradients and inference.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encoders::{self, Encoders};
use super::fusion::{self, Fusion};
use super::matcher::{self, highlight_labels, LabelPrior, Matcher};
use super::predictor::{self, one_hot, Boundary, Predictor, SpanPrediction};
use super::{init_rng, Ctx, Init, Mode, ModelConfig, ParamStore, Result};
use crate::autodiff::{BatchStats, Var};
use crate::data::{snippetize, time_to_index, Dataset, MotionSequence, SkeletonGraph, JOINTS, JOINT_FEATURES};
use crate::tensor::TensorError;
use crate::Tensor;

/// One query with its motion pooled to snippets and its boundaries mapped
/// to snippet indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub sample: usize,
    /// `[T·J × d_p]` joint features.
    pub joints: Tensor,
    pub steps: usize,
    pub tokens: Vec<usize>,
    pub duration: f64,
    pub i_s: usize,
    pub i_e: usize,
}

pub fn prepare_sample(ds: &Dataset, sample: usize, max_snippets: usize) -> std::result::Result<PreparedSample, crate::data::DataError> {
    let s = &ds.samples[sample];
    let motion = ds.motion(&s.motion_id).ok_or_else(|| crate::data::DataError::Invalid {
        what: format!("sample {sample}"),
        msg: format!("unknown motion {:?}", s.motion_id),
    })?;
    let mut prep = prepare_query(motion, &s.token_ids, max_snippets)?;
    prep.sample = sample;
    prep.i_s = time_to_index(s.span.0, motion.duration, prep.steps)?;
    prep.i_e = time_to_index(s.span.1, motion.duration, prep.steps)?;
    Ok(prep)
}

/// Pairs an arbitrary query with a motion; the span fields are zero.
pub fn prepare_query(
    motion: &MotionSequence,
    tokens: &[usize],
    max_snippets: usize,
) -> std::result::Result<PreparedSample, crate::data::DataError> {
    let snippets = snippetize(&motion.frame_tensor::<f64>(), max_snippets)?;
    let steps = snippets.rows();
    let joints = snippets
        .reshape(&[steps * JOINTS, JOINT_FEATURES])
        .map_err(|e| crate::data::DataError::Invalid {
            what: format!("motion {}", motion.id),
            msg: e.to_string(),
        })?;
    Ok(PreparedSample {
        sample: 0,
        joints,
        steps,
        tokens: tokens.to_vec(),
        duration: motion.duration,
        i_s: 0,
        i_e: 0,
    })
}

/// Ground-truth labels and the random label-prior corruptions for one
/// training pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSupervision {
    pub i_s: usize,
    pub i_e: usize,
    pub highlight: Vec<bool>,
    pub mask: Vec<bool>,
    pub flipped_start: Vec<bool>,
    pub flipped_end: Vec<bool>,
}

impl SampleSupervision {
    pub fn draw(prep: &PreparedSample, alpha: f64, beta: f64, rng: &mut impl Rng) -> Self {
        let t = prep.steps;
        Self {
            i_s: prep.i_s,
            i_e: prep.i_e,
            highlight: highlight_labels(prep.i_s, prep.i_e, t),
            mask: matcher::perturbation_mask(t, alpha, rng),
            flipped_start: predictor::flip_labels(&one_hot(prep.i_s, t), beta, rng),
            flipped_end: predictor::flip_labels(&one_hot(prep.i_e, t), beta, rng),
        }
    }
}

/// Weights of the sequence, span, recovery and alignment terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub seq: f64,
    pub span: f64,
    pub rec: f64,
    pub align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seq: 5.0,
            span: 1.0,
            rec: 1.0,
            align: 1.0,
        }
    }
}

/// Loss components of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub seq: f64,
    pub span_s: f64,
    pub span_e: f64,
    pub rec_s: f64,
    pub rec_e: f64,
    pub align_s: f64,
    pub align_e: f64,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("L_Seq", self.seq),
            ("L_Span_s", self.span_s),
            ("L_Span_e", self.span_e),
            ("L_rec_s", self.rec_s),
            ("L_rec_e", self.rec_e),
            ("L_Align_s", self.align_s),
            ("L_Align_e", self.align_e),
        ]
    }

    pub fn span(&self) -> f64 {
        0.5 * (self.span_s + self.span_e)
    }

    pub fn rec(&self) -> f64 {
        0.5 * (self.rec_s + self.rec_e)
    }

    pub fn align(&self) -> f64 {
        0.5 * (self.align_s + self.align_e)
    }

    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.seq * self.seq + w.span * self.span() + w.rec * self.rec() + w.align * self.align()
    }

    pub fn mean(parts: &[LossParts]) -> LossParts {
        let n = parts.len().max(1) as f64;
        let mut out = LossParts::default();
        for p in parts {
            out.seq += p.seq / n;
            out.span_s += p.span_s / n;
            out.span_e += p.span_e / n;
            out.rec_s += p.rec_s / n;
            out.rec_e += p.rec_e / n;
            out.align_s += p.align_s / n;
            out.align_e += p.align_e / n;
        }
        out
    }
}

/// Loss handles recorded for one sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleLosses {
    pub seq: Var,
    pub span_s: Var,
    pub span_e: Var,
    pub rec_s: Var,
    pub rec_e: Var,
    pub align_s: Var,
    pub align_e: Var,
    pub total: Var,
}

impl SampleLosses {
    pub fn parts(&self, cx: &Ctx<'_>) -> LossParts {
        let v = |x: Var| cx.tape.value(x).data()[0];
        LossParts {
            seq: v(self.seq),
            span_s: v(self.span_s),
            span_e: v(self.span_e),
            rec_s: v(self.rec_s),
            rec_e: v(self.rec_e),
            align_s: v(self.align_s),
            align_e: v(self.align_e),
        }
    }
}

/// Handles of one sample's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SampleForward {
    pub highlight: Var,
    pub p_s: Var,
    pub p_e: Var,
    pub losses: Option<SampleLosses>,
}

/// Gradients and diagnostics of one optimization batch.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// Mean gradient per parameter, indexed like the store; `None` for
    /// buffers and parameters that received no gradient.
    pub grads: Vec<Option<Tensor>>,
    pub parts: Vec<LossParts>,
    pub bn_stats: Vec<BatchStats<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoders: Encoders,
    pub fusion: Fusion,
    pub matcher: Matcher,
    pub predictor: Predictor,
}

impl Network {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut init = Init {
            store: &mut params,
            rng: init_rng(seed),
        };
        let skeleton = Arc::new(SkeletonGraph::human22().adjacency);
        let encoders = Encoders::init(&mut init, &config, JOINT_FEATURES, skeleton);
        let fusion = Fusion::init(&mut init, config.d);
        let matcher = Matcher::init(&mut init, config.d);
        let predictor = Predictor::init(&mut init, config.d);
        Ok(Self {
            config,
            params,
            encoders,
            fusion,
            matcher,
            predictor,
        })
    }

    /// Everything after the spatial encoder for one sample. `m_prime` is the
    /// pooled `[T×d]` motion; supervision switches on the label priors and
    /// the losses.
    pub fn forward_sample(
        &self,
        cx: &mut Ctx<'_>,
        m_prime: Var,
        tokens: &[usize],
        sup: Option<&SampleSupervision>,
        weights: &LossWeights,
    ) -> Result<SampleForward> {
        let q_prime = encoders::embed_query(cx, &self.encoders, tokens)?;
        let m_bar = encoders::temporal_encode(cx, &self.encoders, m_prime, q_prime, None, None)?;
        let q_bar = encoders::encode_query(cx, &self.encoders, q_prime, m_prime, None, None)?;
        let mq = fusion::cqa_fuse(cx, &self.fusion, m_bar, q_bar, None, None)?;
        let sentence = fusion::additive_attention_pool(cx, &self.fusion, q_bar, None)?;
        let mq = fusion::attach_sentence(cx, &self.fusion, mq, sentence)?;

        let prior = match sup {
            Some(s) => LabelPrior::Perturbed {
                highlight: &s.highlight,
                mask: &s.mask,
            },
            None => LabelPrior::Pad,
        };
        let highlight = matcher::highlight_scores(cx, &self.matcher, mq, prior)?;
        let mt = matcher::apply_highlight(cx, highlight, mq)?;

        let p = &self.predictor;
        let start = predictor::predict_span(cx, p, mt, Boundary::Start)?;
        let cond = predictor::condition_end_branch(cx, p, mt, start.hidden)?;
        let end = predictor::predict_span(cx, p, cond, Boundary::End)?;

        let losses = match sup {
            None => None,
            Some(s) => {
                let rec_ps = predictor::recover_forward(cx, p, mt, &s.flipped_start, Boundary::Start)?;
                let rec_pe = predictor::recover_forward(cx, p, cond, &s.flipped_end, Boundary::End)?;
                let seq = matcher::seq_loss(cx, highlight, &s.highlight)?;
                let span_s = predictor::span_loss(cx, start.probs, s.i_s)?;
                let span_e = predictor::span_loss(cx, end.probs, s.i_e)?;
                let rec_s = predictor::span_loss(cx, rec_ps, s.i_s)?;
                let rec_e = predictor::span_loss(cx, rec_pe, s.i_e)?;
                let align_s = predictor::align_loss(cx, start.probs, rec_ps)?;
                let align_e = predictor::align_loss(cx, end.probs, rec_pe)?;
                let terms = [
                    cx.tape.scale(seq, weights.seq),
                    cx.tape.scale(span_s, 0.5 * weights.span),
                    cx.tape.scale(span_e, 0.5 * weights.span),
                    cx.tape.scale(rec_s, 0.5 * weights.rec),
                    cx.tape.scale(rec_e, 0.5 * weights.rec),
                    cx.tape.scale(align_s, 0.5 * weights.align),
                    cx.tape.scale(align_e, 0.5 * weights.align),
                ];
                let total = cx.tape.add_all(&terms)?;
                Some(SampleLosses {
                    seq,
                    span_s,
                    span_e,
                    rec_s,
                    rec_e,
                    align_s,
                    align_e,
                    total,
                })
            }
        };
        Ok(SampleForward {
            highlight,
            p_s: start.probs,
            p_e: end.probs,
            losses,
        })
    }

    /// Mean-loss gradients over a batch. The spatial encoder runs once over
    /// the whole batch so batch normalization sees batch × time × joint
    /// statistics; the remaining per-sample graphs run in parallel and feed
    /// their gradients back into it.
    pub fn batch_gradients(
        &self,
        batch: &[&PreparedSample],
        sups: &[SampleSupervision],
        weights: &LossWeights,
    ) -> Result<BatchOutput> {
        if batch.is_empty() || batch.len() != sups.len() {
            return Err(TensorError::Invalid {
                op: "batch_gradients",
                msg: format!("{} samples, {} supervisions", batch.len(), sups.len()),
            });
        }
        let mut joint_rows = Vec::new();
        for p in batch {
            joint_rows.extend_from_slice(p.joints.data());
        }
        let total_rows = joint_rows.len() / JOINT_FEATURES;
        let mut cx = Ctx::new(&self.params);
        let x = cx.constant(Tensor::new(vec![total_rows, JOINT_FEATURES], joint_rows)?);
        let (m_all, bn_stats) = encoders::spatial_encode(&mut cx, &self.encoders, x, Mode::Train)?;

        let d = self.config.d;
        let mut offsets = Vec::with_capacity(batch.len());
        let mut off = 0;
        for p in batch {
            offsets.push(off);
            off += p.steps;
        }
        let m_all_value = cx.tape.value(m_all);
        let slices: Vec<Tensor> = batch
            .iter()
            .zip(&offsets)
            .map(|(p, &o)| Tensor::new(vec![p.steps, d], m_all_value.data()[o * d..(o + p.steps) * d].to_vec()))
            .collect::<std::result::Result<_, _>>()?;

        type PerSample = (Vec<Option<Tensor>>, Tensor, LossParts);
        let per_sample: Vec<PerSample> = batch
            .par_iter()
            .zip(sups.par_iter())
            .zip(slices.into_par_iter())
            .map(|((p, sup), m_slice)| -> Result<PerSample> {
                let mut scx = Ctx::new(&self.params);
                let mp = scx.tape.leaf(m_slice, true);
                let fwd = self.forward_sample(&mut scx, mp, &p.tokens, Some(sup), weights)?;
                let losses = fwd.losses.expect("supervised pass");
                let parts = losses.parts(&scx);
                let grads = scx.tape.backward(losses.total)?;
                let g_m = grads.wrt(mp).cloned().unwrap_or_else(|| Tensor::zeros(&[p.steps, d]));
                let per_param = (0..self.params.len()).map(|k| grads.bound(k).cloned()).collect();
                Ok((per_param, g_m, parts))
            })
            .collect::<Result<_>>()?;

        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut g_m_all = Vec::with_capacity(total_rows / JOINTS * d);
        let mut parts = Vec::with_capacity(batch.len());
        for (per_param, g_m, p) in per_sample {
            for (slot, g) in grads.iter_mut().zip(per_param) {
                if let Some(g) = g {
                    match slot {
                        Some(acc) => acc.accumulate(&g),
                        None => *slot = Some(g),
                    }
                }
            }
            g_m_all.extend_from_slice(g_m.data());
            parts.push(p);
        }

        // pull the per-sample gradients back through the spatial encoder
        let g_const = cx.constant(Tensor::new(vec![total_rows / JOINTS, d], g_m_all)?);
        let surrogate = cx.tape.mul(m_all, g_const)?;
        let surrogate = cx.tape.sum(surrogate);
        let enc_grads = cx.tape.backward(surrogate)?;
        for (k, slot) in grads.iter_mut().enumerate() {
            if let Some(g) = enc_grads.bound(k) {
                match slot {
                    Some(acc) => acc.accumulate(g),
                    None => *slot = Some(g.clone()),
                }
            }
        }
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        for (k, e) in self.params.entries().iter().enumerate() {
            if !e.trainable {
                grads[k] = None;
            }
        }
        Ok(BatchOutput {
            grads,
            parts,
            bn_stats,
        })
    }

    /// Folds a batch's normalization statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<f64>]) {
        let layers = self.encoders.gcn.clone();
        for (layer, s) in layers.iter().zip(stats) {
            layer.update_running(&mut self.params, s, self.config.bn_momentum);
        }
    }

    /// Label-free inference: span prediction plus highlight scores.
    pub fn infer(&self, prep: &PreparedSample) -> Result<(SpanPrediction, Vec<f64>)> {
        let mut cx = Ctx::new(&self.params);
        let x = cx.constant(prep.joints.clone());
        let (m_prime, _) = encoders::spatial_encode(&mut cx, &self.encoders, x, Mode::Eval)?;
        let fwd = self.forward_sample(&mut cx, m_prime, &prep.tokens, None, &LossWeights::default())?;
        let p_s = cx.tape.value(fwd.p_s).data().to_vec();
        let p_e = cx.tape.value(fwd.p_e).data().to_vec();
        let span = predictor::infer_span(&p_s, &p_e)?;
        Ok((span, cx.tape.value(fwd.highlight).data().to_vec()))
    }
}
