//! Start/end boundary predictors with the label-recovery path, the span and
//! alignment losses, and joint-probability span inference.

use rand::Rng;
use serde::Serialize;

use super::{Ctx, Init, Linear, ParamId, Result};
use crate::autodiff::Var;
use crate::tensor::TensorError;
use crate::Tensor;

pub const START: usize = 0;
pub const NON_START: usize = 1;
pub const END: usize = 2;
pub const NON_END: usize = 3;
pub const PAD_LABEL: usize = 4;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Start,
    End,
}

impl Boundary {
    fn rows(self) -> (usize, usize) {
        match self {
            Boundary::Start => (START, NON_START),
            Boundary::End => (END, NON_END),
        }
    }
}

/// Input projection, GRU and prediction head of one boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub input: Linear,
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub head_hidden: Linear,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub head_out: Linear,
}

impl Branch {
    fn init<R: Rng>(init: &mut Init<'_, R>, name: &str, d: usize) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            input: init.linear(&format!("{name}.input"), 2 * d, d),
            w_ih: init.uniform(format!("{name}.gru.w_ih"), &[d, 3 * d], bound),
            w_hh: init.uniform(format!("{name}.gru.w_hh"), &[d, 3 * d], bound),
            b_ih: init.fill(format!("{name}.gru.b_ih"), &[3 * d], 0.0, true),
            b_hh: init.fill(format!("{name}.gru.b_hh"), &[3 * d], 0.0, true),
            head_hidden: init.linear(&format!("{name}.head.hidden"), d, d),
            ln_gamma: init.fill(format!("{name}.head.ln.gamma"), &[d], 1.0, true),
            ln_beta: init.fill(format!("{name}.head.ln.beta"), &[d], 0.0, true),
            head_out: init.linear(&format!("{name}.head.out"), d, 1),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![
            self.input.w,
            self.input.b,
            self.w_ih,
            self.w_hh,
            self.b_ih,
            self.b_hh,
            self.head_hidden.w,
            self.head_hidden.b,
            self.ln_gamma,
            self.ln_beta,
            self.head_out.w,
            self.head_out.b,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    /// Rows: start, non-start, end, non-end, PAD.
    pub labels: ParamId,
    pub start: Branch,
    pub end: Branch,
    pub end_cond: Linear,
}

impl Predictor {
    pub(crate) fn init<R: Rng>(init: &mut Init<'_, R>, d: usize) -> Self {
        Self {
            labels: init.uniform("predictor.labels".into(), &[5, d], 1.0 / (d as f64).sqrt()),
            start: Branch::init(init, "predictor.start", d),
            end: Branch::init(init, "predictor.end", d),
            end_cond: init.linear("predictor.end_cond", 2 * d, d),
        }
    }

    pub fn branch(&self, b: Boundary) -> &Branch {
        match b {
            Boundary::Start => &self.start,
            Boundary::End => &self.end,
        }
    }
}

/// Scores, probabilities and GRU states of one branch pass.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutput {
    pub scores: Var,
    pub probs: Var,
    pub hidden: Var,
}

fn run_branch(cx: &mut Ctx<'_>, p: &Predictor, branch: &Branch, x: Var, label_rows: &[usize]) -> Result<BranchOutput> {
    let (t, d) = cx.tape.value(x).expect_rank2("predictor")?;
    let table = cx.p(p.labels);
    let labels = cx.tape.gather(table, label_rows)?;
    let cat = cx.tape.concat_cols(&[x, labels])?;
    let input = branch.input.forward(cx, cat)?;
    let w_ih = cx.p(branch.w_ih);
    let w_hh = cx.p(branch.w_hh);
    let b_ih = cx.p(branch.b_ih);
    let b_hh = cx.p(branch.b_hh);
    let h0 = cx.constant(Tensor::zeros(&[d]));
    let hidden = cx.tape.gru(input, w_ih, w_hh, b_ih, b_hh, h0)?;
    let z = branch.head_hidden.forward(cx, hidden)?;
    let g = cx.p(branch.ln_gamma);
    let b = cx.p(branch.ln_beta);
    let z = cx.tape.layer_norm(z, g, b, LN_EPS)?;
    let z = cx.tape.relu(z);
    let scores = branch.head_out.forward(cx, z)?;
    let scores = cx.tape.reshape(scores, &[t])?;
    let probs = cx.tape.softmax(scores, None)?;
    Ok(BranchOutput { scores, probs, hidden })
}

/// Predicting part: the label channel carries PAD at every step.
pub fn predict_span(cx: &mut Ctx<'_>, p: &Predictor, x: Var, which: Boundary) -> Result<BranchOutput> {
    let t = cx.tape.value(x).rows();
    run_branch(cx, p, p.branch(which), x, &vec![PAD_LABEL; t])
}

/// Recovering part: the label channel carries the flipped boundary labels.
pub fn recover_forward(cx: &mut Ctx<'_>, p: &Predictor, x: Var, flipped: &[bool], which: Boundary) -> Result<Var> {
    let t = cx.tape.value(x).rows();
    if flipped.len() != t {
        return Err(TensorError::ShapeMismatch {
            op: "recover_forward",
            left: vec![t],
            right: vec![flipped.len()],
        });
    }
    let (on, off) = which.rows();
    let rows: Vec<usize> = flipped.iter().map(|&b| if b { on } else { off }).collect();
    Ok(run_branch(cx, p, p.branch(which), x, &rows)?.probs)
}

/// End-branch input: `FFN([M̃^q ; H_s])`.
pub fn condition_end_branch(cx: &mut Ctx<'_>, p: &Predictor, mt: Var, start_hidden: Var) -> Result<Var> {
    let cat = cx.tape.concat_cols(&[mt, start_hidden])?;
    p.end_cond.forward(cx, cat)
}

/// `−ln P[target]`.
pub fn span_loss(cx: &mut Ctx<'_>, probs: Var, target: usize) -> Result<Var> {
    cx.tape.nll(probs, target)
}

/// `KL(P || P_rec)` with the recovering distribution held fixed.
pub fn align_loss(cx: &mut Ctx<'_>, probs: Var, recovered: Var) -> Result<Var> {
    let fixed = cx.tape.detach(recovered);
    cx.tape.kl(probs, fixed)
}

/// With probability `beta`, moves the single 1 of a one-hot vector to a
/// uniformly chosen other position.
pub fn flip_labels(y: &[bool], beta: f64, rng: &mut impl Rng) -> Vec<bool> {
    let flip = rng.gen_bool(beta.clamp(0.0, 1.0));
    let Some(i) = y.iter().position(|&b| b) else {
        return y.to_vec();
    };
    if !flip || y.len() < 2 {
        return y.to_vec();
    }
    let mut j = rng.gen_range(0..y.len() - 1);
    if j >= i {
        j += 1;
    }
    let mut out = vec![false; y.len()];
    out[j] = true;
    out
}

pub fn one_hot(i: usize, t: usize) -> Vec<bool> {
    (0..t).map(|k| k == i).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanPrediction {
    pub p_s: Vec<f64>,
    pub p_e: Vec<f64>,
    pub start: usize,
    pub end: usize,
    /// `P_s[start] · P_e[end]`.
    pub score: f64,
}

/// Maximizes `P_s[a]·P_e[b]` over `a ≤ b`; ties go to the smallest `a`,
/// then the smallest `b`.
pub fn infer_span(p_s: &[f64], p_e: &[f64]) -> Result<SpanPrediction> {
    if p_s.len() != p_e.len() || p_s.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "infer_span",
            left: vec![p_s.len()],
            right: vec![p_e.len()],
        });
    }
    // earliest argmax of the prefix only moves right, so scanning ends in
    // order and keeping the first strict improvement yields the tie rule
    let mut best_prefix = 0;
    let (mut start, mut end, mut score) = (0, 0, f64::NEG_INFINITY);
    for b in 0..p_e.len() {
        if p_s[b] > p_s[best_prefix] {
            best_prefix = b;
        }
        let v = p_s[best_prefix] * p_e[b];
        if v > score {
            (start, end, score) = (best_prefix, b, v);
        }
    }
    Ok(SpanPrediction {
        p_s: p_s.to_vec(),
        p_e: p_e.to_vec(),
        start,
        end,
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_rng, ParamStore};
    use crate::rng::stream;

    fn tiny(d: usize) -> (ParamStore, Predictor) {
        let mut store = ParamStore::default();
        let mut init = Init {
            store: &mut store,
            rng: init_rng(6),
        };
        let p = Predictor::init(&mut init, d);
        (store, p)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = stream(seed, &[55]);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn start_probs(store: &ParamStore, p: &Predictor, x: &Tensor) -> (Tensor, Tensor) {
        let mut cx = Ctx::new(store);
        let xv = cx.constant(x.clone());
        let out = predict_span(&mut cx, p, xv, Boundary::Start).unwrap();
        (cx.tape.value(out.scores).clone(), cx.tape.value(out.probs).clone())
    }

    #[test]
    fn probabilities_sum_to_one_and_are_causal() {
        let (store, p) = tiny(3);
        let x = random(&[6, 3], 1);
        let (scores, probs) = start_probs(&store, &p, &x);
        assert!((probs.sum() - 1.0).abs() < 1e-12);
        let mut x2 = x.clone();
        for v in x2.row_mut(4) {
            *v += 0.7;
        }
        let (scores2, _) = start_probs(&store, &p, &x2);
        assert_eq!(&scores.data()[..4], &scores2.data()[..4]);
        assert_ne!(scores.data()[4], scores2.data()[4]);
    }

    #[test]
    fn zero_network_is_uniform() {
        let (mut store, p) = tiny(3);
        for id in p.start.params() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let (_, probs) = start_probs(&store, &p, &random(&[4, 3], 2));
        assert!(probs.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn flip_cases() {
        let mut rng = stream(3, &[]);
        let y = one_hot(2, 5);
        assert_eq!(flip_labels(&y, 0.0, &mut rng), y);
        assert_eq!(flip_labels(&[true], 1.0, &mut rng), vec![true]);
        for beta in [0.1, 0.5, 1.0] {
            for _ in 0..200 {
                let f = flip_labels(&y, beta, &mut rng);
                assert_eq!(f.iter().filter(|&&b| b).count(), 1);
                let ham = f.iter().zip(&y).filter(|(a, b)| a != b).count();
                assert!(ham == 0 || ham == 2);
            }
        }
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            let f = flip_labels(&one_hot(0, 4), 1.0, &mut rng);
            counts[f.iter().position(|&b| b).unwrap()] += 1;
        }
        assert_eq!(counts[0], 0);
        let expect = draws as f64 / 3.0;
        let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        assert!(chi2 < 13.82, "{counts:?}");
    }

    #[test]
    fn recovery_sums_to_one_and_leaves_prediction_alone() {
        let (store, p) = tiny(3);
        let x = random(&[5, 3], 4);
        let (_, alone) = start_probs(&store, &p, &x);
        let mut cx = Ctx::new(&store);
        let xv = cx.constant(x.clone());
        let rec = recover_forward(&mut cx, &p, xv, &one_hot(1, 5), Boundary::Start).unwrap();
        let pred = predict_span(&mut cx, &p, xv, Boundary::Start).unwrap();
        assert!((cx.tape.value(rec).sum() - 1.0).abs() < 1e-12);
        assert_eq!(cx.tape.value(pred.probs), &alone);
    }

    #[test]
    fn span_and_align_losses() {
        let store = ParamStore::default();
        let mut cx = Ctx::new(&store);
        let one = cx.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let l = span_loss(&mut cx, one, 1).unwrap();
        assert_eq!(cx.tape.value(l).data()[0], 0.0);
        let uni = cx.constant(Tensor::vector(vec![1.0 / 64.0; 64]));
        let l = span_loss(&mut cx, uni, 10).unwrap();
        assert!((cx.tape.value(l).data()[0] - 4.1589).abs() < 1e-4);
        let q = cx.constant(Tensor::vector(vec![0.25, 0.75]));
        let l = span_loss(&mut cx, q, 0).unwrap();
        assert!((cx.tape.value(l).data()[0] - 1.3863).abs() < 1e-4);

        let p = cx.constant(Tensor::vector(vec![1.0, 0.0]));
        let h = cx.constant(Tensor::vector(vec![0.5, 0.5]));
        let a = align_loss(&mut cx, p, h).unwrap();
        assert!((cx.tape.value(a).data()[0] - 2f64.ln()).abs() < 1e-12);
        let a = align_loss(&mut cx, h, h).unwrap();
        assert_eq!(cx.tape.value(a).data()[0], 0.0);
    }

    #[test]
    fn align_gradient_skips_recovered() {
        let store = ParamStore::default();
        let mut cx = Ctx::new(&store);
        let p = cx.tape.leaf(Tensor::vector(vec![0.3, 0.7]), true);
        let r = cx.tape.leaf(Tensor::vector(vec![0.6, 0.4]), true);
        let a = align_loss(&mut cx, p, r).unwrap();
        let g = cx.tape.backward(a).unwrap();
        assert!(g.wrt(p).is_some());
        assert!(g.wrt(r).is_none());
    }

    #[test]
    fn end_conditioning() {
        let (mut store, p) = tiny(3);
        let mt = random(&[5, 3], 5);
        let hs = random(&[5, 3], 6);
        let end_scores = |store: &ParamStore, hs: &Tensor| {
            let mut cx = Ctx::new(store);
            let mv = cx.constant(mt.clone());
            let hv = cx.constant(hs.clone());
            let cond = condition_end_branch(&mut cx, &p, mv, hv).unwrap();
            let out = predict_span(&mut cx, &p, cond, Boundary::End).unwrap();
            assert!((cx.tape.value(out.probs).sum() - 1.0).abs() < 1e-12);
            (cx.tape.value(cond).clone(), cx.tape.value(out.scores).clone())
        };
        let (_, base) = end_scores(&store, &hs);
        let mut hs2 = hs.clone();
        hs2.row_mut(2)[1] += 0.9;
        let (_, moved) = end_scores(&store, &hs2);
        assert_eq!(&base.data()[..2], &moved.data()[..2]);
        assert!((2..5).all(|i| base.data()[i] != moved.data()[i]));

        // zero start states: only the first half of the conditioning map acts
        let (cond_zero, _) = end_scores(&store, &Tensor::zeros(&[5, 3]));
        let w = store.get_mut(p.end_cond.w);
        for r in 3..6 {
            w.row_mut(r).fill(0.0);
        }
        let (cond_half, _) = end_scores(&store, &hs);
        assert_eq!(cond_zero, cond_half);
    }

    fn brute(p_s: &[f64], p_e: &[f64]) -> (usize, usize, f64) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for a in 0..p_s.len() {
            for b in a..p_e.len() {
                if p_s[a] * p_e[b] > best.2 {
                    best = (a, b, p_s[a] * p_e[b]);
                }
            }
        }
        best
    }

    #[test]
    fn infer_examples() {
        let s = infer_span(&[0.7, 0.2, 0.1], &[0.1, 0.2, 0.7]).unwrap();
        assert_eq!((s.start, s.end), (0, 2));
        assert!((s.score - 0.49).abs() < 1e-12);
        let u = [1.0 / 3.0; 3];
        let s = infer_span(&u, &u).unwrap();
        assert_eq!((s.start, s.end), (0, 0));
        let s = infer_span(&[0.1, 0.8, 0.1], &[0.8, 0.1, 0.1]).unwrap();
        assert_eq!((s.start, s.end), (0, 0));
        assert!((s.score - 0.08).abs() < 1e-12);
    }

    #[test]
    fn infer_matches_brute_force() {
        let mut rng = stream(8, &[]);
        for case in 0..200 {
            let t = rng.gen_range(1..12);
            // coarse values force ties
            let draw = |rng: &mut crate::rng::StreamRng| {
                let raw: Vec<f64> = (0..t).map(|_| rng.gen_range(0..4) as f64 + if case % 2 == 0 { 0.0 } else { rng.gen::<f64>() }).collect();
                let z: f64 = raw.iter().sum::<f64>().max(1e-9);
                raw.iter().map(|v| v / z).collect::<Vec<_>>()
            };
            let p_s = draw(&mut rng);
            let p_e = draw(&mut rng);
            let s = infer_span(&p_s, &p_e).unwrap();
            assert_eq!((s.start, s.end, s.score), brute(&p_s, &p_e), "{p_s:?} {p_e:?}");
        }
    }
}
