//! Context-query attention between motion and text, additive-attention
//! sentence pooling, and sentence attachment.

use rand::Rng;

use super::{Ctx, Init, Linear, ParamId, Result};
use crate::autodiff::Var;

#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    /// Trilinear similarity `w_mᵀm + w_qᵀq + w_mqᵀ(m⊙q)`.
    pub w_m: ParamId,
    pub w_q: ParamId,
    pub w_mq: ParamId,
    pub out: Linear,
    pub pool_proj: Linear,
    pub pool_v: ParamId,
    pub sentence: Linear,
}

impl Fusion {
    pub(crate) fn init<R: Rng>(init: &mut Init<'_, R>, d: usize) -> Self {
        Self {
            w_m: init.weight("cqa.w_m".into(), d, 1),
            w_q: init.weight("cqa.w_q".into(), d, 1),
            w_mq: init.uniform("cqa.w_mq".into(), &[d], 1.0 / (d as f64).sqrt()),
            out: init.linear("cqa.out", 4 * d, d),
            pool_proj: init.linear("pool.proj", d, d),
            pool_v: init.weight("pool.v".into(), d, 1),
            sentence: init.linear("sentence", 2 * d, d),
        }
    }
}

/// Pairwise similarity `S[T×N]`.
pub fn similarity(cx: &mut Ctx<'_>, f: &Fusion, m: Var, q: Var) -> Result<Var> {
    let t = cx.tape.value(m).rows();
    let n = cx.tape.value(q).rows();
    let w_m = cx.p(f.w_m);
    let w_q = cx.p(f.w_q);
    let w_mq = cx.p(f.w_mq);
    let a = cx.tape.matmul(m, w_m)?;
    let a = cx.tape.reshape(a, &[t])?;
    let b = cx.tape.matmul(q, w_q)?;
    let b = cx.tape.reshape(b, &[n])?;
    let mw = cx.tape.mul_row(m, w_mq)?;
    let qt = cx.tape.transpose(q)?;
    let c = cx.tape.matmul(mw, qt)?;
    let s = cx.tape.add_col(c, a)?;
    cx.tape.add_row(s, b)
}

/// Query-aware motion features `M^q[T×d]`.
pub fn cqa_fuse(
    cx: &mut Ctx<'_>,
    f: &Fusion,
    m: Var,
    q: Var,
    m_mask: Option<&[bool]>,
    q_mask: Option<&[bool]>,
) -> Result<Var> {
    let s = similarity(cx, f, m, q)?;
    let s_r = cx.tape.softmax(s, q_mask)?;
    let st = cx.tape.transpose(s)?;
    let s_ct = cx.tape.softmax(st, m_mask)?;
    let a_mq = cx.tape.matmul(s_r, q)?;
    let back = cx.tape.matmul(s_ct, m)?;
    let a_qm = cx.tape.matmul(s_r, back)?;
    let m_amq = cx.tape.mul(m, a_mq)?;
    let m_aqm = cx.tape.mul(m, a_qm)?;
    let cat = cx.tape.concat_cols(&[m, a_mq, m_amq, m_aqm])?;
    f.out.forward(cx, cat)
}

/// Sentence vector `q[1×d]` with weights `softmax(vᵀ tanh(W q̄_i + b))`.
pub fn additive_attention_pool(cx: &mut Ctx<'_>, f: &Fusion, q: Var, q_mask: Option<&[bool]>) -> Result<Var> {
    let n = cx.tape.value(q).rows();
    let h = f.pool_proj.forward(cx, q)?;
    let h = cx.tape.tanh(h);
    let v = cx.p(f.pool_v);
    let scores = cx.tape.matmul(h, v)?;
    let scores = cx.tape.reshape(scores, &[1, n])?;
    let w = cx.tape.softmax(scores, q_mask)?;
    cx.tape.matmul(w, q)
}

/// `FFN([M^q ; q])` with `q` repeated at every step.
pub fn attach_sentence(cx: &mut Ctx<'_>, f: &Fusion, mq: Var, sentence: Var) -> Result<Var> {
    let t = cx.tape.value(mq).rows();
    let rep = cx.tape.repeat_rows(sentence, t)?;
    let cat = cx.tape.concat_cols(&[mq, rep])?;
    f.sentence.forward(cx, cat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_rng, ParamStore};
    use crate::rng::stream;
    use crate::Tensor;

    fn tiny(d: usize) -> (ParamStore, Fusion) {
        let mut store = ParamStore::default();
        let mut init = Init {
            store: &mut store,
            rng: init_rng(8),
        };
        let f = Fusion::init(&mut init, d);
        (store, f)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = stream(seed, &[77]);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Pulls out `A_MQ` by giving the output map an identity on its
    /// second quarter.
    fn select_quarter(store: &mut ParamStore, f: &Fusion, d: usize, quarter: usize) {
        let w = store.get_mut(f.out.w);
        w.data_mut().fill(0.0);
        for i in 0..d {
            w.set(quarter * d + i, i, 1.0);
        }
        store.get_mut(f.out.b).data_mut().fill(0.0);
    }

    #[test]
    fn single_word_replicates_across_time() {
        let d = 3;
        let (mut store, f) = tiny(d);
        select_quarter(&mut store, &f, d, 1);
        let q = random(&[1, d], 1);
        let mut cx = Ctx::new(&store);
        let mv = cx.constant(random(&[4, d], 2));
        let qv = cx.constant(q.clone());
        let out = cqa_fuse(&mut cx, &f, mv, qv, None, None).unwrap();
        for r in 0..4 {
            assert_eq!(cx.tape.value(out).row(r), q.data());
        }
    }

    #[test]
    fn scalar_case_by_hand() {
        let (mut store, f) = tiny(1);
        store.get_mut(f.w_m).data_mut()[0] = 0.3;
        store.get_mut(f.w_q).data_mut()[0] = -0.2;
        store.get_mut(f.w_mq).data_mut()[0] = 0.5;
        store.get_mut(f.out.w).data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        store.get_mut(f.out.b).data_mut()[0] = 0.1;
        let (m, q) = (2.0, -1.5);
        let mut cx = Ctx::new(&store);
        let mv = cx.constant(Tensor::from_f64_rows(&[&[m]]).unwrap());
        let qv = cx.constant(Tensor::from_f64_rows(&[&[q]]).unwrap());
        let out = cqa_fuse(&mut cx, &f, mv, qv, None, None).unwrap();
        // singleton softmaxes are 1, so A_MQ = q and A_QM = m
        let want = m + 2.0 * q + 3.0 * m * q + 4.0 * m * m + 0.1;
        assert!((cx.tape.value(out).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn uniform_similarity_averages_words() {
        let d = 3;
        let (mut store, f) = tiny(d);
        for id in [f.w_m, f.w_q, f.w_mq] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        select_quarter(&mut store, &f, d, 1);
        let q = random(&[4, d], 3);
        let mut cx = Ctx::new(&store);
        let mv = cx.constant(random(&[2, d], 4));
        let qv = cx.constant(q.clone());
        let out = cqa_fuse(&mut cx, &f, mv, qv, None, None).unwrap();
        for c in 0..d {
            let mean = (0..4).map(|r| q.at(r, c)).sum::<f64>() / 4.0;
            for r in 0..2 {
                assert!((cx.tape.value(out).at(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn time_permutation_equivariance() {
        let d = 3;
        let (store, f) = tiny(d);
        let m = random(&[4, d], 5);
        let perm = [2, 0, 3, 1];
        let mut mp = m.clone();
        for (dst, &src) in perm.iter().enumerate() {
            mp.row_mut(dst).copy_from_slice(m.row(src));
        }
        let mut cx = Ctx::new(&store);
        let qv = cx.constant(random(&[3, d], 6));
        let mv = cx.constant(m);
        let mpv = cx.constant(mp);
        let a = cqa_fuse(&mut cx, &f, mv, qv, None, None).unwrap();
        let b = cqa_fuse(&mut cx, &f, mpv, qv, None, None).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..d {
                assert!((cx.tape.value(b).at(dst, c) - cx.tape.value(a).at(src, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padded_words_never_matter() {
        let d = 3;
        let (store, f) = tiny(d);
        let q = random(&[2, d], 7);
        let mut cx = Ctx::new(&store);
        let mv = cx.constant(random(&[3, d], 8));
        let qv = cx.constant(q.clone());
        let base = cqa_fuse(&mut cx, &f, mv, qv, None, None).unwrap();
        let pooled = additive_attention_pool(&mut cx, &f, qv, None).unwrap();
        let mut padded = q.data().to_vec();
        padded.extend_from_slice(&[5.0, -5.0, 5.0]);
        let qp = cx.constant(Tensor::new(vec![3, d], padded).unwrap());
        let mask = [true, true, false];
        let with_pad = cqa_fuse(&mut cx, &f, mv, qp, None, Some(&mask)).unwrap();
        let pooled_pad = additive_attention_pool(&mut cx, &f, qp, Some(&mask)).unwrap();
        assert!(cx.tape.value(base).max_abs_diff(cx.tape.value(with_pad)) < 1e-12);
        assert!(cx.tape.value(pooled).max_abs_diff(cx.tape.value(pooled_pad)) < 1e-12);
    }

    #[test]
    fn pooling_cases() {
        let d = 2;
        let (mut store, f) = tiny(d);
        let mut cx = Ctx::new(&store);
        let single = random(&[1, d], 9);
        let sv = cx.constant(single.clone());
        let p = additive_attention_pool(&mut cx, &f, sv, None).unwrap();
        assert!(cx.tape.value(p).max_abs_diff(&single.reshape(&[1, d]).unwrap()) < 1e-15);

        let same = Tensor::from_f64_rows(&[&[0.4, -0.3], &[0.4, -0.3], &[0.4, -0.3]]).unwrap();
        let sv = cx.constant(same.clone());
        let p = additive_attention_pool(&mut cx, &f, sv, None).unwrap();
        assert!(cx.tape.value(p).max_abs_diff(&Tensor::from_f64_rows(&[&[0.4, -0.3]]).unwrap()) < 1e-15);

        // W = I, b = 0, v = [1, 0]: scores are tanh of the first column
        store.get_mut(f.pool_proj.w).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        store.get_mut(f.pool_proj.b).data_mut().fill(0.0);
        store.get_mut(f.pool_v).data_mut().copy_from_slice(&[1.0, 0.0]);
        let q = Tensor::from_f64_rows(&[&[1.0, 2.0], &[-1.0, 0.5]]).unwrap();
        let mut cx = Ctx::new(&store);
        let qv = cx.constant(q);
        let p = additive_attention_pool(&mut cx, &f, qv, None).unwrap();
        let (s1, s2) = (1f64.tanh(), (-1f64).tanh());
        let w1 = s1.exp() / (s1.exp() + s2.exp());
        let want = [w1 * 1.0 + (1.0 - w1) * -1.0, w1 * 2.0 + (1.0 - w1) * 0.5];
        for (a, b) in cx.tape.value(p).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attach_cases() {
        let d = 2;
        let (mut store, f) = tiny(d);
        let mq = random(&[3, d], 10);
        let sentence = random(&[1, d], 11);

        // identity on the first half
        let w = store.get_mut(f.sentence.w);
        w.data_mut().fill(0.0);
        w.set(0, 0, 1.0);
        w.set(1, 1, 1.0);
        store.get_mut(f.sentence.b).data_mut().fill(0.0);
        let mut cx = Ctx::new(&store);
        let mv = cx.constant(mq.clone());
        let sv = cx.constant(sentence.clone());
        let out = attach_sentence(&mut cx, &f, mv, sv).unwrap();
        assert_eq!(cx.tape.value(out), &mq);
        let zero = cx.constant(Tensor::zeros(&[1, d]));
        let out0 = attach_sentence(&mut cx, &f, mv, zero).unwrap();
        assert_eq!(cx.tape.value(out0), cx.tape.value(out));

        let (store, f) = tiny(d);
        let mut cx = Ctx::new(&store);
        let mv = cx.constant(mq.clone());
        let sv = cx.constant(sentence.clone());
        let out = attach_sentence(&mut cx, &f, mv, sv).unwrap();
        let w = store.get(f.sentence.w);
        let b = store.get(f.sentence.b);
        for r in 0..3 {
            let x = [mq.at(r, 0), mq.at(r, 1), sentence.data()[0], sentence.data()[1]];
            for c in 0..d {
                let want: f64 = (0..4).map(|k| x[k] * w.at(k, c)).sum::<f64>() + b.data()[c];
                assert!((cx.tape.value(out).at(r, c) - want).abs() < 1e-12);
            }
        }
    }
}
