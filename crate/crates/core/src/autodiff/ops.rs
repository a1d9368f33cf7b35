//! Forward kernels on plain tensors. The tape reuses these for its forward
//! pass and adds the matching vector-Jacobian products.

use crate::scalar::{sigmoid, Scalar};
use crate::tensor::{Tensor, TensorError};

/// Floor applied inside every logarithm taken by a loss.
pub const LOG_FLOOR: f64 = 1e-12;

pub(crate) fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    let (m, k) = a.expect_rank2("matmul")?;
    let (k2, n) = b.expect_rank2("matmul")?;
    if k != k2 {
        return Err(mismatch("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![S::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `out += a[m×k] · b[k×n]`
pub(crate) fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    S::gemm_acc(m, k, n, a, (k, 1), b, (n, 1), out);
}

/// `out += aᵀ · b` with `a[k×m]`, `b[k×n]`, `out[m×n]`.
pub(crate) fn matmul_tn_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], k: usize, m: usize, n: usize) {
    S::gemm_acc(m, k, n, a, (1, m), b, (n, 1), out);
}

/// `out += a · bᵀ` with `a[m×k]`, `b[n×k]`, `out[m×n]`.
pub(crate) fn matmul_nt_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    S::gemm_acc(m, k, n, a, (k, 1), b, (1, k), out);
}

/// Softmax over the trailing axis. Positions with `valid[j] == false` get
/// exactly zero probability; a row with no valid position is an error.
pub fn softmax_masked<S: Scalar>(
    logits: &Tensor<S>,
    valid: Option<&[bool]>,
) -> Result<Tensor<S>, TensorError> {
    let n = logits.cols();
    if let Some(mask) = valid {
        if mask.len() != n {
            return Err(mismatch("softmax_masked", logits.shape(), &[mask.len()]));
        }
        if !mask.iter().any(|&v| v) {
            return Err(TensorError::DegenerateRow {
                op: "softmax_masked",
                row: 0,
            });
        }
    }
    let is_valid = |j: usize| valid.map_or(true, |m| m[j]);
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let row = out.row_mut(r);
        let max = (0..n)
            .filter(|&j| is_valid(j))
            .map(|j| row[j])
            .fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if is_valid(j) {
                *v = (*v - max).exp();
                total += *v;
            } else {
                *v = S::zero();
            }
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Categorical cross-entropy `-ln pred[target]` with the log floor applied.
pub fn cross_entropy<S: Scalar>(pred: &Tensor<S>, target: usize) -> Result<S, TensorError> {
    let p = *pred.data().get(target).ok_or(TensorError::Index {
        op: "cross_entropy",
        index: target,
        len: pred.len(),
    })?;
    Ok(-p.max(S::lit(LOG_FLOOR)).ln())
}

/// Mean per-element binary cross-entropy.
pub fn binary_cross_entropy<S: Scalar>(pred: &Tensor<S>, target: &[S]) -> Result<S, TensorError> {
    if pred.len() != target.len() {
        return Err(mismatch("binary_cross_entropy", pred.shape(), &[target.len()]));
    }
    let floor = S::lit(LOG_FLOOR);
    let n = S::from_usize_lossy(pred.len());
    let total: S = pred
        .data()
        .iter()
        .zip(target)
        .map(|(&p, &y)| -(y * p.max(floor).ln() + (S::one() - y) * (S::one() - p).max(floor).ln()))
        .sum();
    Ok(total / n)
}

/// `Σ p·ln(p/q)` with `0·ln(0/q) = 0` and `q` floored at [`LOG_FLOOR`].
pub fn kl_divergence<S: Scalar>(p: &Tensor<S>, q: &Tensor<S>) -> Result<S, TensorError> {
    if p.len() != q.len() {
        return Err(mismatch("kl_divergence", p.shape(), q.shape()));
    }
    let floor = S::lit(LOG_FLOOR);
    Ok(p.data()
        .iter()
        .zip(q.data())
        .filter(|(&pi, _)| pi > S::zero())
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(floor).ln()))
        .sum())
}

/// Weights of a single-layer gated recurrent unit, gate order (r, z, n).
#[derive(Debug, Clone)]
pub struct GruWeights<S> {
    /// `[d_in × 3h]`
    pub w_ih: Tensor<S>,
    /// `[h × 3h]`
    pub w_hh: Tensor<S>,
    /// `[3h]`
    pub b_ih: Tensor<S>,
    /// `[3h]`
    pub b_hh: Tensor<S>,
}

impl<S: Scalar> GruWeights<S> {
    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[0]
    }

    pub fn zeros(d_in: usize, h: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[d_in, 3 * h]),
            w_hh: Tensor::zeros(&[h, 3 * h]),
            b_ih: Tensor::zeros(&[3 * h]),
            b_hh: Tensor::zeros(&[3 * h]),
        }
    }
}

/// Per-step activations kept for backpropagation through time.
#[derive(Debug, Clone)]
pub(crate) struct GruCache<S> {
    pub r: Vec<S>,
    pub z: Vec<S>,
    pub n: Vec<S>,
    /// `h_{t-1} W_hn + b_hn` per step.
    pub hn: Vec<S>,
}

pub(crate) fn gru_run<S: Scalar>(
    inputs: &Tensor<S>,
    w: &GruWeights<S>,
    h0: &[S],
) -> Result<(Tensor<S>, GruCache<S>), TensorError> {
    let (t_len, d_in) = inputs.expect_rank2("gru_forward")?;
    let h = w.hidden();
    if w.w_ih.shape() != [d_in, 3 * h] {
        return Err(mismatch("gru_forward", inputs.shape(), w.w_ih.shape()));
    }
    if w.w_hh.shape() != [h, 3 * h] || w.b_ih.len() != 3 * h || w.b_hh.len() != 3 * h {
        return Err(mismatch("gru_forward", w.w_hh.shape(), w.b_hh.shape()));
    }
    if h0.len() != h {
        return Err(mismatch("gru_forward", &[h], &[h0.len()]));
    }
    let mut gx = vec![S::zero(); t_len * 3 * h];
    matmul_into(inputs.data(), w.w_ih.data(), &mut gx, t_len, d_in, 3 * h);
    let mut out = vec![S::zero(); t_len * h];
    let mut cache = GruCache {
        r: vec![S::zero(); t_len * h],
        z: vec![S::zero(); t_len * h],
        n: vec![S::zero(); t_len * h],
        hn: vec![S::zero(); t_len * h],
    };
    let mut prev = h0.to_vec();
    let mut gh = vec![S::zero(); 3 * h];
    for t in 0..t_len {
        gh.copy_from_slice(w.b_hh.data());
        matmul_into(&prev, w.w_hh.data(), &mut gh, 1, h, 3 * h);
        let gxt = &gx[t * 3 * h..(t + 1) * 3 * h];
        let bi = w.b_ih.data();
        for j in 0..h {
            let r = sigmoid(gxt[j] + bi[j] + gh[j]);
            let z = sigmoid(gxt[h + j] + bi[h + j] + gh[h + j]);
            let hn = gh[2 * h + j];
            let n = (gxt[2 * h + j] + bi[2 * h + j] + r * hn).tanh();
            let next = (S::one() - z) * n + z * prev[j];
            let k = t * h + j;
            cache.r[k] = r;
            cache.z[k] = z;
            cache.n[k] = n;
            cache.hn[k] = hn;
            out[k] = next;
        }
        prev.copy_from_slice(&out[t * h..(t + 1) * h]);
    }
    Ok((Tensor::new(vec![t_len, h], out)?, cache))
}

/// Runs a unidirectional GRU over `inputs[T×d_in]`, returning every hidden
/// state and the final one.
pub fn gru_forward<S: Scalar>(
    inputs: &Tensor<S>,
    weights: &GruWeights<S>,
    h0: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>), TensorError> {
    let (outputs, _) = gru_run(inputs, weights, h0.data())?;
    let h = weights.hidden();
    let t_len = outputs.rows();
    let last = if t_len == 0 {
        h0.data().to_vec()
    } else {
        outputs.row(t_len - 1).to_vec()
    };
    debug_assert_eq!(last.len(), h);
    Ok((outputs, Tensor::vector(last)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_f64_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let m = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);
        let out = matmul(&t(&[&[1.0, 2.0]]), &t(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(out.data(), &[11.0]);
        let z = matmul(&Tensor::<f64>::zeros(&[2, 3]), &t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]])).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        match err {
            TensorError::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_masked(&Tensor::vector(vec![0.0, 0.0]), None).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax_masked(&Tensor::vector(vec![1.0, 1.0, 7.0]), Some(&[true, true, false])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5, 0.0]);
        let p = softmax_masked(&Tensor::vector(vec![2f64.ln(), 0.0]), None).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_all_masked_is_degenerate() {
        let err = softmax_masked(&Tensor::vector(vec![1.0, 2.0]), Some(&[false, false])).unwrap_err();
        assert!(matches!(err, TensorError::DegenerateRow { .. }));
    }

    #[test]
    fn cross_entropy_examples() {
        let one_hot = Tensor::vector(vec![0.0, 1.0, 0.0]);
        assert_eq!(cross_entropy(&one_hot, 1).unwrap(), 0.0);
        let uniform = Tensor::vector(vec![0.25f64; 4]);
        assert!((cross_entropy(&uniform, 2).unwrap() - 1.3862943611198906).abs() < 1e-12);
        let b = binary_cross_entropy(&Tensor::vector(vec![0.5]), &[1.0]).unwrap();
        assert!((b - std::f64::consts::LN_2).abs() < 1e-12);
        // zero at the target is clamped, never NaN or infinite
        let c = cross_entropy(&Tensor::vector(vec![1.0, 0.0]), 1).unwrap();
        assert!((c - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn kl_examples() {
        let p = Tensor::vector(vec![0.3, 0.7]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let k = kl_divergence(&Tensor::vector(vec![1.0, 0.0]), &Tensor::vector(vec![0.5, 0.5])).unwrap();
        assert!((k - std::f64::consts::LN_2).abs() < 1e-12);
        let k = kl_divergence(&Tensor::vector(vec![0.5f64, 0.5]), &Tensor::vector(vec![0.25, 0.75])).unwrap();
        // 0.5 ln 2 + 0.5 ln(2/3)
        assert!((k - 0.143841036225890).abs() < 1e-4);
    }

    #[test]
    fn gru_zero_network_outputs_zero() {
        let w = GruWeights::<f64>::zeros(3, 2);
        let x = t(&[&[1.0, -2.0, 0.5], &[3.0, 0.1, 0.0]]);
        let (out, last) = gru_forward(&x, &w, &Tensor::zeros(&[2])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(last.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_scalar_step_matches_hand_evaluation() {
        // d_in = h = 1; gate order (r, z, n)
        let w = GruWeights {
            w_ih: t(&[&[0.5, -0.3, 0.8]]),
            w_hh: t(&[&[0.2, 0.4, -0.6]]),
            b_ih: Tensor::vector(vec![0.1, 0.0, -0.2]),
            b_hh: Tensor::vector(vec![0.0, 0.05, 0.3]),
        };
        let x = 1.5;
        let h0 = 0.4;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let r = sig(0.5 * x + 0.1 + 0.2 * h0 + 0.0);
        let z = sig(-0.3 * x + 0.0 + 0.4 * h0 + 0.05);
        let n = (0.8 * x - 0.2 + r * (-0.6 * h0 + 0.3)).tanh();
        let expected = (1.0 - z) * n + z * h0;
        let (_, last) = gru_forward(&t(&[&[x]]), &w, &Tensor::vector(vec![h0])).unwrap();
        assert!((last.data()[0] - expected).abs() < 1e-14);
    }
}
