//! Spatial graph-convolution encoder over skeleton joints, the parallel
//! self/cross attention stack, and the shared text encoder.

use std::sync::Arc;

use rand::Rng;

use super::{Ctx, Init, Linear, Mode, ParamId, ParamStore, Result};
use crate::autodiff::{BatchStats, Var};
use crate::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    pub w: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgpaBlock {
    pub q_m: Linear,
    pub k_m: Linear,
    pub v_m: Linear,
    pub k_q: Linear,
    pub v_q: Linear,
    /// Gate computed from the cross path, applied to the self path.
    pub gate_c: Linear,
    /// Gate computed from the self path, applied to the cross path.
    pub gate_s: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoders {
    pub word_emb: ParamId,
    pub text_proj: Linear,
    pub gcn: Vec<GcnLayer>,
    pub sgpa: Vec<SgpaBlock>,
    pub heads: usize,
    /// Adds each block's input back onto its output.
    pub residual: bool,
    pub skeleton: Arc<Tensor>,
}

impl GcnLayer {
    pub(crate) fn init<R: Rng>(init: &mut Init<'_, R>, name: &str, d_in: usize, d: usize) -> Self {
        Self {
            w: init.weight(format!("{name}.w"), d_in, d),
            gamma: init.fill(format!("{name}.bn.gamma"), &[d], 1.0, true),
            beta: init.fill(format!("{name}.bn.beta"), &[d], 0.0, true),
            running_mean: init.fill(format!("{name}.bn.running_mean"), &[d], 0.0, false),
            running_var: init.fill(format!("{name}.bn.running_var"), &[d], 1.0, false),
        }
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running(&self, store: &mut ParamStore, stats: &BatchStats<f64>, momentum: f64) {
        for (id, batch) in [(self.running_mean, &stats.mean), (self.running_var, &stats.var)] {
            for (r, &b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}

impl SgpaBlock {
    pub(crate) fn init<R: Rng>(init: &mut Init<'_, R>, name: &str, d: usize) -> Self {
        Self {
            q_m: init.linear(&format!("{name}.q_m"), d, d),
            k_m: init.linear(&format!("{name}.k_m"), d, d),
            v_m: init.linear(&format!("{name}.v_m"), d, d),
            k_q: init.linear(&format!("{name}.k_q"), d, d),
            v_q: init.linear(&format!("{name}.v_q"), d, d),
            gate_c: init.linear(&format!("{name}.gate_c"), d, d),
            gate_s: init.linear(&format!("{name}.gate_s"), d, d),
        }
    }
}

impl Encoders {
    pub(crate) fn init<R: Rng>(
        init: &mut Init<'_, R>,
        cfg: &super::ModelConfig,
        d_in: usize,
        skeleton: Arc<Tensor>,
    ) -> Self {
        let word_emb = init.uniform("text.word_emb".into(), &[cfg.vocab_size, cfg.d_word], 1.0);
        let text_proj = init.linear("text.proj", cfg.d_word, cfg.d);
        let gcn = (0..cfg.gcn_layers)
            .map(|l| GcnLayer::init(init, &format!("gcn.{l}"), if l == 0 { d_in } else { cfg.d }, cfg.d))
            .collect();
        let sgpa = (0..cfg.sgpa_blocks)
            .map(|k| SgpaBlock::init(init, &format!("sgpa.{k}"), cfg.d))
            .collect();
        Self {
            word_emb,
            text_proj,
            gcn,
            sgpa,
            heads: cfg.heads,
            residual: cfg.sgpa_residual,
            skeleton,
        }
    }
}

/// `BN(tanh(A H W))` over every element's joint block of `h[E·J × d_in]`.
/// In training mode the batch statistics are returned for the running
/// averages.
pub fn gcn_layer_forward(
    cx: &mut Ctx<'_>,
    layer: &GcnLayer,
    h: Var,
    adj: &Arc<Tensor>,
    mode: Mode,
) -> Result<(Var, Option<BatchStats<f64>>)> {
    let w = cx.p(layer.w);
    let hw = cx.tape.matmul(h, w)?;
    let mixed = cx.tape.graph_mix(hw, Arc::clone(adj))?;
    let act = cx.tape.tanh(mixed);
    let gamma = cx.p(layer.gamma);
    let beta = cx.p(layer.beta);
    match mode {
        Mode::Train => {
            let (out, stats) = cx.tape.batch_norm(act, gamma, beta, BN_EPS)?;
            Ok((out, Some(stats)))
        }
        Mode::Eval => {
            let mean = cx.params.get(layer.running_mean).map(|m| -m);
            let inv = cx.params.get(layer.running_var).map(|v| 1.0 / (v + BN_EPS).sqrt());
            let shift = cx.constant(mean);
            let scale = cx.constant(inv);
            let centered = cx.tape.add_row(act, shift)?;
            let normed = cx.tape.mul_row(centered, scale)?;
            let scaled = cx.tape.mul_row(normed, gamma)?;
            Ok((cx.tape.add_row(scaled, beta)?, None))
        }
    }
}

/// Runs the GCN stack on `x[E·J × d_p]` and mean-pools joints, giving one
/// row per element.
pub fn spatial_encode(cx: &mut Ctx<'_>, enc: &Encoders, x: Var, mode: Mode) -> Result<(Var, Vec<BatchStats<f64>>)> {
    let mut h = x;
    let mut stats = Vec::new();
    for layer in &enc.gcn {
        let (out, s) = gcn_layer_forward(cx, layer, h, &enc.skeleton, mode)?;
        h = out;
        stats.extend(s);
    }
    let joints = enc.skeleton.rows();
    Ok((cx.tape.block_mean_rows(h, joints)?, stats))
}

/// Multi-head scaled dot-product attention without an output projection.
pub fn attention(cx: &mut Ctx<'_>, q: Var, k: Var, v: Var, heads: usize, key_mask: Option<&[bool]>) -> Result<Var> {
    let d = cx.tape.value(q).cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                cx.tape.slice_cols(q, h * dh, dh)?,
                cx.tape.slice_cols(k, h * dh, dh)?,
                cx.tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = cx.tape.transpose(kh)?;
        let logits = cx.tape.matmul(qh, kt)?;
        let logits = cx.tape.scale(logits, scale);
        let weights = cx.tape.softmax(logits, key_mask)?;
        outs.push(cx.tape.matmul(weights, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        cx.tape.concat_cols(&outs)
    }
}

/// One parallel attention block: self attention over `x`, cross attention
/// from `x` into `ctx`, merged by sigmoid cross-gates.
pub fn sgpa_block(
    cx: &mut Ctx<'_>,
    block: &SgpaBlock,
    heads: usize,
    x: Var,
    ctx: Var,
    x_mask: Option<&[bool]>,
    ctx_mask: Option<&[bool]>,
) -> Result<Var> {
    let q = block.q_m.forward(cx, x)?;
    let k_self = block.k_m.forward(cx, x)?;
    let v_self = block.v_m.forward(cx, x)?;
    let k_ctx = block.k_q.forward(cx, ctx)?;
    let v_ctx = block.v_q.forward(cx, ctx)?;
    let m_s = attention(cx, q, k_self, v_self, heads, x_mask)?;
    let m_c = attention(cx, q, k_ctx, v_ctx, heads, ctx_mask)?;
    let g_c = block.gate_c.forward(cx, m_c)?;
    let g_c = cx.tape.sigmoid(g_c);
    let g_s = block.gate_s.forward(cx, m_s)?;
    let g_s = cx.tape.sigmoid(g_s);
    let a = cx.tape.mul(g_c, m_s)?;
    let b = cx.tape.mul(g_s, m_c)?;
    cx.tape.add(a, b)
}

fn sgpa_stack(
    cx: &mut Ctx<'_>,
    enc: &Encoders,
    x: Var,
    ctx: Var,
    x_mask: Option<&[bool]>,
    ctx_mask: Option<&[bool]>,
) -> Result<Var> {
    let mut h = x;
    for block in &enc.sgpa {
        let out = sgpa_block(cx, block, enc.heads, h, ctx, x_mask, ctx_mask)?;
        h = if enc.residual { cx.tape.add(h, out)? } else { out };
    }
    Ok(h)
}

/// Motion stream through the block stack with the projected text as context.
pub fn temporal_encode(
    cx: &mut Ctx<'_>,
    enc: &Encoders,
    m: Var,
    q: Var,
    m_mask: Option<&[bool]>,
    q_mask: Option<&[bool]>,
) -> Result<Var> {
    sgpa_stack(cx, enc, m, q, m_mask, q_mask)
}

/// The same stack with the roles swapped: text attends to itself and to the
/// motion.
pub fn encode_query(
    cx: &mut Ctx<'_>,
    enc: &Encoders,
    q: Var,
    m: Var,
    q_mask: Option<&[bool]>,
    m_mask: Option<&[bool]>,
) -> Result<Var> {
    sgpa_stack(cx, enc, q, m, q_mask, m_mask)
}

/// Token lookup followed by the input projection: `Q′ = FFN(E[tokens])`.
pub fn embed_query(cx: &mut Ctx<'_>, enc: &Encoders, tokens: &[usize]) -> Result<Var> {
    let table = cx.p(enc.word_emb);
    let words = cx.tape.gather(table, tokens)?;
    enc.text_proj.forward(cx, words)
}
