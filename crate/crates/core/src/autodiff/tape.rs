use std::collections::HashMap;
use std::sync::Arc;

use super::ops::{self, mismatch, GruCache, GruWeights, LOG_FLOOR};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax {
        x: Var,
        mask: Option<Vec<bool>>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    RepeatRows(Var),
    MeanRows(Var),
    BlockMeanRows {
        x: Var,
        block: usize,
    },
    GraphMix {
        x: Var,
        adj: Arc<Tensor<S>>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Gru {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
        h0: Var,
        cache: GruCache<S>,
    },
    Nll {
        p: Var,
        target: usize,
    },
    Bce {
        p: Var,
        target: Vec<S>,
    },
    Kl {
        p: Var,
        q: Var,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased variance, used for running averages.
    pub var: Vec<S>,
}

/// Reverse-mode computation tape. Values are recorded in topological order
/// as operations are applied; [`Tape::backward`] consumes the tape.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    bound: HashMap<usize, Var>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an input. Gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Binds an externally owned parameter. Binding the same key twice
    /// returns the original handle so gradients accumulate in one place.
    pub fn bind(&mut self, key: usize, value: &Tensor<S>) -> Var {
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.bound.insert(key, v);
        v
    }

    /// Copies a value as a constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    fn row_broadcast(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize)> {
        let (m, n) = self.value(x).expect_rank2(op)?;
        if self.value(v).len() != n {
            return Err(mismatch(op, self.shape(x), self.shape(v)));
        }
        Ok((m, n))
    }

    fn col_broadcast(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize)> {
        let (m, n) = self.value(x).expect_rank2(op)?;
        if self.value(v).len() != m {
            return Err(mismatch(op, self.shape(x), self.shape(v)));
        }
        Ok((m, n))
    }

    /// `x[m×n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast("add_row", x, b)?;
        let mut out = self.value(x).clone();
        let bv = self.value(b).data();
        for i in 0..m {
            for (o, &bb) in out.row_mut(i).iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let _ = n;
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddRow(x, b), ng))
    }

    /// `x[m×n] ⊙ v[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (m, _) = self.row_broadcast("mul_row", x, v)?;
        let mut out = self.value(x).clone();
        let vv = self.value(v).data();
        for i in 0..m {
            for (o, &s) in out.row_mut(i).iter_mut().zip(vv) {
                *o *= s;
            }
        }
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(out, Op::MulRow(x, v), ng))
    }

    /// `x[m×n] + c[m]` broadcast over columns.
    pub fn add_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (m, _) = self.col_broadcast("add_col", x, c)?;
        let mut out = self.value(x).clone();
        for i in 0..m {
            let s = self.value(c).data()[i];
            for o in out.row_mut(i) {
                *o += s;
            }
        }
        let ng = self.ng(x) || self.ng(c);
        Ok(self.push(out, Op::AddCol(x, c), ng))
    }

    /// Scales row `i` of `x[m×n]` by `c[i]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (m, _) = self.col_broadcast("mul_col", x, c)?;
        let mut out = self.value(x).clone();
        for i in 0..m {
            let s = self.value(c).data()[i];
            for o in out.row_mut(i) {
                *o *= s;
            }
        }
        let ng = self.ng(x) || self.ng(c);
        Ok(self.push(out, Op::MulCol(x, c), ng))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(S::tanh);
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(S::zero()));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// Row-wise softmax over the trailing axis with an optional key mask.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = ops::softmax_masked(self.value(x), mask)?;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                mask: mask.map(<[bool]>::to_vec),
            },
            ng,
        ))
    }

    /// Per-row normalization with learnable scale and shift over the
    /// trailing axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (m, n) = self.row_broadcast("layer_norm", x, gamma)?;
        self.row_broadcast("layer_norm", x, beta)?;
        let xv = self.value(x);
        let nn = S::from_usize_lossy(n);
        let mut xhat = vec![S::zero(); m * n];
        let mut inv_std = vec![S::zero(); m];
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<S>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                xhat[i * n + j] = (row[j] - mean) * is;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = g[j] * xhat[i * n + j] + b[j];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Training-mode batch normalization: statistics per column over all
    /// rows of `x[R×C]`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<(Var, BatchStats<S>)> {
        let (r, c) = self.row_broadcast("batch_norm", x, gamma)?;
        self.row_broadcast("batch_norm", x, beta)?;
        if r == 0 {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                msg: "empty batch".into(),
            });
        }
        let xv = self.value(x).data();
        let rr = S::from_usize_lossy(r);
        let mut mean = vec![S::zero(); c];
        for i in 0..r {
            for j in 0..c {
                mean[j] += xv[i * c + j];
            }
        }
        for m in &mut mean {
            *m /= rr;
        }
        let mut var = vec![S::zero(); c];
        for i in 0..r {
            for j in 0..c {
                let d = xv[i * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        let mut inv_std = vec![S::zero(); c];
        let mut unbiased = vec![S::zero(); c];
        for j in 0..c {
            let biased = var[j] / rr;
            inv_std[j] = S::one() / (biased + eps).sqrt();
            unbiased[j] = if r > 1 {
                var[j] / S::from_usize_lossy(r - 1)
            } else {
                biased
            };
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![S::zero(); r * c];
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                let k = i * c + j;
                xhat[k] = (xv[k] - mean[j]) * inv_std[j];
                out[k] = g[j] * xhat[k] + b[j];
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        );
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let (m, _) = self.value(first).expect_rank2("concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).expect_rank2("concat_cols")?;
            if pm != m {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pn;
        }
        let mut out = vec![S::zero(); m * total];
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            let pn = pv.cols();
            for i in 0..m {
                out[i * total + off..i * total + off + pn].copy_from_slice(pv.row(i));
            }
            off += pn;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).expect_rank2("slice_cols")?;
        if start + len > n {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x, start }, ng))
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let (_, n) = self.value(first).expect_rank2("concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).expect_rank2("concat_rows")?;
            if pn != n {
                return Err(mismatch("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![rows, n], data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).expect_rank2("slice_rows")?;
        if start + len > m {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                len: m,
            });
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![len, n], out)?, Op::SliceRows { x, start }, ng))
    }

    /// Embedding lookup: row `i` of the output is `table[idx[i]]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).expect_rank2("gather")?;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(TensorError::Index {
                    op: "gather",
                    index: i,
                    len: v,
                });
            }
            out.extend_from_slice(self.value(table).row(i));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], out)?,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Broadcasts a single row (`[d]` or `[1×d]`) to `[n×d]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != 1 {
            return Err(TensorError::Rank {
                op: "repeat_rows",
                expected: 1,
                shape: xv.shape().to_vec(),
            });
        }
        let d = xv.cols();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(xv.data());
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::RepeatRows(x), ng))
    }

    /// Mean over rows: `[m×d] → [1×d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, d) = self.value(x).expect_rank2("mean_rows")?;
        let mut out = vec![S::zero(); d];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(self.value(x).row(i)) {
                *o += v;
            }
        }
        let mm = S::from_usize_lossy(m);
        for o in &mut out {
            *o /= mm;
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![1, d], out)?, Op::MeanRows(x), ng))
    }

    /// Mean over consecutive groups of `block` rows: `[E·block×d] → [E×d]`.
    pub fn block_mean_rows(&mut self, x: Var, block: usize) -> Result<Var> {
        let (m, d) = self.value(x).expect_rank2("block_mean_rows")?;
        if block == 0 || m % block != 0 {
            return Err(mismatch("block_mean_rows", &[m, d], &[block]));
        }
        let e = m / block;
        let bb = S::from_usize_lossy(block);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); e * d];
        for i in 0..m {
            let o = &mut out[(i / block) * d..(i / block + 1) * d];
            for (ov, &v) in o.iter_mut().zip(&xv[i * d..(i + 1) * d]) {
                *ov += v;
            }
        }
        for o in &mut out {
            *o /= bb;
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![e, d], out)?, Op::BlockMeanRows { x, block }, ng))
    }

    /// Applies a fixed `J×J` mixing matrix to every consecutive block of `J`
    /// rows of `x[E·J×d]` (graph propagation over a skeleton per element).
    pub fn graph_mix(&mut self, x: Var, adj: Arc<Tensor<S>>) -> Result<Var> {
        let (m, d) = self.value(x).expect_rank2("graph_mix")?;
        let (j, j2) = adj.expect_rank2("graph_mix")?;
        if j != j2 || j == 0 || m % j != 0 {
            return Err(mismatch("graph_mix", &[m, d], adj.shape()));
        }
        let mut out = vec![S::zero(); m * d];
        let xv = self.value(x).data();
        for e in 0..m / j {
            let base = e * j * d;
            ops::matmul_into(adj.data(), &xv[base..base + j * d], &mut out[base..base + j * d], j, j, d);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![m, d], out)?, Op::GraphMix { x, adj }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / S::from_usize_lossy(v.len().max(1));
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Sums scalars; convenient for assembling losses.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut acc = *terms.first().ok_or(TensorError::Invalid {
            op: "add_all",
            msg: "no terms".into(),
        })?;
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// `x W + b` with `W[in×out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Unidirectional GRU over `x[T×d_in]` from initial state `h0[h]`;
    /// returns all hidden states `[T×h]`.
    #[allow(clippy::too_many_arguments)]
    pub fn gru(&mut self, x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var, h0: Var) -> Result<Var> {
        let weights = GruWeights {
            w_ih: self.value(w_ih).clone(),
            w_hh: self.value(w_hh).clone(),
            b_ih: self.value(b_ih).clone(),
            b_hh: self.value(b_hh).clone(),
        };
        let (out, cache) = ops::gru_run(self.value(x), &weights, self.value(h0).data())?;
        let ng = [x, w_ih, w_hh, b_ih, b_hh, h0].iter().any(|&v| self.ng(v));
        Ok(self.push(
            out,
            Op::Gru {
                x,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                h0,
                cache,
            },
            ng,
        ))
    }

    /// Categorical cross-entropy `-ln p[target]` of a probability vector.
    pub fn nll(&mut self, p: Var, target: usize) -> Result<Var> {
        let v = ops::cross_entropy(self.value(p), target)?;
        let ng = self.ng(p);
        Ok(self.push(Tensor::scalar(v), Op::Nll { p, target }, ng))
    }

    /// Mean binary cross-entropy of probabilities against `{0,1}` targets.
    pub fn bce(&mut self, p: Var, target: &[S]) -> Result<Var> {
        let v = ops::binary_cross_entropy(self.value(p), target)?;
        let ng = self.ng(p);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Bce {
                p,
                target: target.to_vec(),
            },
            ng,
        ))
    }

    /// `KL(p || q)`.
    pub fn kl(&mut self, p: Var, q: Var) -> Result<Var> {
        let v = ops::kl_divergence(self.value(p), self.value(q))?;
        let ng = self.ng(p) || self.ng(q);
        Ok(self.push(Tensor::scalar(v), Op::Kl { p, q }, ng))
    }

    /// Reverse pass from a scalar output. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Rank {
                op: "backward",
                expected: 0,
                shape: self.shape(loss).to_vec(),
            });
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), S::one()));

        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut acc = |v: Var, t: Tensor<S>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.accumulate(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            let out = &nodes[i].value;
            match &nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = val(*a);
                    let bv = val(*b);
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    if nodes[a.0].needs_grad {
                        let mut ga = vec![S::zero(); m * k];
                        ops::matmul_nt_into(g.data(), bv.data(), &mut ga, m, n, k);
                        acc(*a, Tensor::new(vec![m, k], ga)?);
                    }
                    if nodes[b.0].needs_grad {
                        let mut gb = vec![S::zero(); k * n];
                        ops::matmul_tn_into(av.data(), g.data(), &mut gb, m, k, n);
                        acc(*b, Tensor::new(vec![k, n], gb)?);
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()?),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y)?);
                    acc(*b, g.zip_map(val(*a), |x, y| x * y)?);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, g.map(|v| v * c));
                }
                Op::AddRow(x, b) => {
                    acc(*x, g.clone());
                    let n = g.cols();
                    let mut gb = vec![S::zero(); n];
                    for r in 0..g.rows() {
                        for (o, &v) in gb.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*b, Tensor::new(val(*b).shape().to_vec(), gb)?);
                }
                Op::MulRow(x, v) => {
                    let xv = val(*x);
                    let vv = val(*v).data();
                    let n = g.cols();
                    let mut gx = g.clone();
                    let mut gv = vec![S::zero(); n];
                    for r in 0..g.rows() {
                        for j in 0..n {
                            gv[j] += g.row(r)[j] * xv.row(r)[j];
                            gx.row_mut(r)[j] *= vv[j];
                        }
                    }
                    acc(*x, gx);
                    acc(*v, Tensor::new(val(*v).shape().to_vec(), gv)?);
                }
                Op::AddCol(x, c) => {
                    acc(*x, g.clone());
                    let gc: Vec<S> = (0..g.rows()).map(|r| g.row(r).iter().copied().sum()).collect();
                    acc(*c, Tensor::new(val(*c).shape().to_vec(), gc)?);
                }
                Op::MulCol(x, c) => {
                    let xv = val(*x);
                    let cv = val(*c).data();
                    let mut gx = g.clone();
                    let mut gc = vec![S::zero(); g.rows()];
                    for r in 0..g.rows() {
                        gc[r] = g.row(r).iter().zip(xv.row(r)).map(|(&a, &b)| a * b).sum();
                        for o in gx.row_mut(r) {
                            *o *= cv[r];
                        }
                    }
                    acc(*x, gx);
                    acc(*c, Tensor::new(val(*c).shape().to_vec(), gc)?);
                }
                Op::Tanh(x) => acc(*x, g.zip_map(out, |gv, y| gv * (S::one() - y * y))?),
                Op::Sigmoid(x) => acc(*x, g.zip_map(out, |gv, y| gv * y * (S::one() - y))?),
                Op::Relu(x) => acc(
                    *x,
                    g.zip_map(val(*x), |gv, xv| if xv > S::zero() { gv } else { S::zero() })?,
                ),
                Op::Softmax { x, mask } => {
                    let n = out.cols();
                    let mut gx = g.clone();
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gr = g.row(r);
                        let dot: S = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let row = gx.row_mut(r);
                        for j in 0..n {
                            let valid = mask.as_ref().map_or(true, |m| m[j]);
                            row[j] = if valid { y[j] * (gr[j] - dot) } else { S::zero() };
                        }
                    }
                    acc(*x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (m, n) = (g.rows(), g.cols());
                    let gam = val(*gamma).data();
                    let nn = S::from_usize_lossy(n);
                    let mut gx = vec![S::zero(); m * n];
                    let mut gg = vec![S::zero(); n];
                    let mut gb = vec![S::zero(); n];
                    for r in 0..m {
                        let gr = g.row(r);
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for j in 0..n {
                            let dxh = gr[j] * gam[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                            gg[j] += gr[j] * xh[j];
                            gb[j] += gr[j];
                        }
                        for j in 0..n {
                            let dxh = gr[j] * gam[j];
                            gx[r * n + j] = inv_std[r] / nn * (nn * dxh - s1 - xh[j] * s2);
                        }
                    }
                    acc(*x, Tensor::new(vec![m, n], gx)?);
                    acc(*gamma, Tensor::new(val(*gamma).shape().to_vec(), gg)?);
                    acc(*beta, Tensor::new(val(*beta).shape().to_vec(), gb)?);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (r, c) = (g.rows(), g.cols());
                    let gam = val(*gamma).data();
                    let rr = S::from_usize_lossy(r);
                    let mut s1 = vec![S::zero(); c];
                    let mut s2 = vec![S::zero(); c];
                    let mut gg = vec![S::zero(); c];
                    let mut gb = vec![S::zero(); c];
                    for i in 0..r {
                        let gr = g.row(i);
                        for j in 0..c {
                            let xh = xhat[i * c + j];
                            let dxh = gr[j] * gam[j];
                            s1[j] += dxh;
                            s2[j] += dxh * xh;
                            gg[j] += gr[j] * xh;
                            gb[j] += gr[j];
                        }
                    }
                    let mut gx = vec![S::zero(); r * c];
                    for i in 0..r {
                        let gr = g.row(i);
                        for j in 0..c {
                            let k = i * c + j;
                            let dxh = gr[j] * gam[j];
                            gx[k] = inv_std[j] / rr * (rr * dxh - s1[j] - xhat[k] * s2[j]);
                        }
                    }
                    acc(*x, Tensor::new(vec![r, c], gx)?);
                    acc(*gamma, Tensor::new(val(*gamma).shape().to_vec(), gg)?);
                    acc(*beta, Tensor::new(val(*beta).shape().to_vec(), gb)?);
                }
                Op::ConcatCols(parts) => {
                    let m = g.rows();
                    let total = g.cols();
                    let mut off = 0;
                    for p in parts {
                        let pn = val(*p).cols();
                        let mut gp = Vec::with_capacity(m * pn);
                        for r in 0..m {
                            gp.extend_from_slice(&g.data()[r * total + off..r * total + off + pn]);
                        }
                        acc(*p, Tensor::new(vec![m, pn], gp)?);
                        off += pn;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = val(*x);
                    let mut gx = Tensor::zeros(xv.shape());
                    let len = g.cols();
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                    }
                    acc(*x, gx);
                }
                Op::ConcatRows(parts) => {
                    let n = g.cols();
                    let mut off = 0;
                    for p in parts {
                        let pm = val(*p).rows();
                        let gp = g.data()[off * n..(off + pm) * n].to_vec();
                        acc(*p, Tensor::new(vec![pm, n], gp)?);
                        off += pm;
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = val(*x);
                    let n = xv.cols();
                    let mut gx = Tensor::zeros(xv.shape());
                    gx.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                    acc(*x, gx);
                }
                Op::Gather { table, idx } => {
                    let tv = val(*table);
                    let mut gt = Tensor::zeros(tv.shape());
                    for (r, &ix) in idx.iter().enumerate() {
                        for (o, &v) in gt.row_mut(ix).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*table, gt);
                }
                Op::RepeatRows(x) => {
                    let xv = val(*x);
                    let d = xv.cols();
                    let mut gx = vec![S::zero(); d];
                    for r in 0..g.rows() {
                        for (o, &v) in gx.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                Op::MeanRows(x) => {
                    let xv = val(*x);
                    let m = xv.rows();
                    let mm = S::from_usize_lossy(m);
                    let mut gx = Tensor::zeros(xv.shape());
                    for r in 0..m {
                        for (o, &v) in gx.row_mut(r).iter_mut().zip(g.data()) {
                            *o = v / mm;
                        }
                    }
                    acc(*x, gx);
                }
                Op::BlockMeanRows { x, block } => {
                    let xv = val(*x);
                    let d = xv.cols();
                    let bb = S::from_usize_lossy(*block);
                    let mut gx = Tensor::zeros(xv.shape());
                    for r in 0..xv.rows() {
                        let src = &g.data()[(r / block) * d..(r / block + 1) * d];
                        for (o, &v) in gx.row_mut(r).iter_mut().zip(src) {
                            *o = v / bb;
                        }
                    }
                    acc(*x, gx);
                }
                Op::GraphMix { x, adj } => {
                    let (m, d) = (g.rows(), g.cols());
                    let j = adj.shape()[0];
                    let mut gx = vec![S::zero(); m * d];
                    for e in 0..m / j {
                        let base = e * j * d;
                        ops::matmul_tn_into(
                            adj.data(),
                            &g.data()[base..base + j * d],
                            &mut gx[base..base + j * d],
                            j,
                            j,
                            d,
                        );
                    }
                    acc(*x, Tensor::new(vec![m, d], gx)?);
                }
                Op::Reshape(x) => acc(*x, g.reshape(val(*x).shape())?),
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    acc(*x, Tensor::full(val(*x).shape(), gv));
                }
                Op::Mean(x) => {
                    let xv = val(*x);
                    let gv = g.data()[0] / S::from_usize_lossy(xv.len().max(1));
                    acc(*x, Tensor::full(xv.shape(), gv));
                }
                Op::Gru {
                    x,
                    w_ih,
                    w_hh,
                    b_ih,
                    b_hh,
                    h0,
                    cache,
                } => {
                    let grads_gru = gru_backward(
                        val(*x),
                        val(*w_ih),
                        val(*w_hh),
                        val(*h0).data(),
                        out,
                        cache,
                        &g,
                    );
                    acc(*x, grads_gru.x);
                    acc(*w_ih, grads_gru.w_ih);
                    acc(*w_hh, grads_gru.w_hh);
                    acc(*b_ih, Tensor::new(val(*b_ih).shape().to_vec(), grads_gru.b_ih)?);
                    acc(*b_hh, Tensor::new(val(*b_hh).shape().to_vec(), grads_gru.b_hh)?);
                    acc(*h0, Tensor::new(val(*h0).shape().to_vec(), grads_gru.h0)?);
                }
                Op::Nll { p, target } => {
                    let pv = val(*p);
                    let mut gp = Tensor::zeros(pv.shape());
                    let pt = pv.data()[*target];
                    if pt > S::lit(LOG_FLOOR) {
                        gp.data_mut()[*target] = -g.data()[0] / pt;
                    }
                    acc(*p, gp);
                }
                Op::Bce { p, target } => {
                    let pv = val(*p);
                    let floor = S::lit(LOG_FLOOR);
                    let n = S::from_usize_lossy(pv.len());
                    let gs = g.data()[0];
                    let mut gp = Tensor::zeros(pv.shape());
                    for ((o, &pi), &y) in gp.data_mut().iter_mut().zip(pv.data()).zip(target) {
                        let mut d = S::zero();
                        if pi > floor {
                            d -= y / pi;
                        }
                        if S::one() - pi > floor {
                            d += (S::one() - y) / (S::one() - pi);
                        }
                        *o = gs * d / n;
                    }
                    acc(*p, gp);
                }
                Op::Kl { p, q } => {
                    let pv = val(*p);
                    let qv = val(*q);
                    let floor = S::lit(LOG_FLOOR);
                    let gs = g.data()[0];
                    let mut gp = Tensor::zeros(pv.shape());
                    let mut gq = Tensor::zeros(qv.shape());
                    for k in 0..pv.len() {
                        let pi = pv.data()[k];
                        let qi = qv.data()[k];
                        if pi > S::zero() {
                            gp.data_mut()[k] = gs * (pi.ln() - qi.max(floor).ln() + S::one());
                            if qi > floor {
                                gq.data_mut()[k] = -gs * pi / qi;
                            }
                        }
                    }
                    acc(*p, gp);
                    acc(*q, gq);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            bound: self.bound,
        })
    }
}

struct GruGrads<S> {
    x: Tensor<S>,
    w_ih: Tensor<S>,
    w_hh: Tensor<S>,
    b_ih: Vec<S>,
    b_hh: Vec<S>,
    h0: Vec<S>,
}

fn gru_backward<S: Scalar>(
    x: &Tensor<S>,
    w_ih: &Tensor<S>,
    w_hh: &Tensor<S>,
    h0: &[S],
    out: &Tensor<S>,
    cache: &GruCache<S>,
    g: &Tensor<S>,
) -> GruGrads<S> {
    let t_len = x.rows();
    let d_in = x.cols();
    let h = h0.len();
    let h3 = 3 * h;
    let mut gx_all = vec![S::zero(); t_len * h3];
    let mut gw_hh = vec![S::zero(); h * h3];
    let mut gb_hh = vec![S::zero(); h3];
    let mut dh_next = vec![S::zero(); h];
    let mut gh = vec![S::zero(); h3];
    for t in (0..t_len).rev() {
        let prev: &[S] = if t == 0 { h0 } else { out.row(t - 1) };
        let mut dh_prev = vec![S::zero(); h];
        for j in 0..h {
            let k = t * h + j;
            let (r, z, n, hn) = (cache.r[k], cache.z[k], cache.n[k], cache.hn[k]);
            let dh = g.row(t)[j] + dh_next[j];
            let dn = dh * (S::one() - z);
            let dz = dh * (prev[j] - n);
            dh_prev[j] = dh * z;
            let dan = dn * (S::one() - n * n);
            let dr = dan * hn;
            let dar = dr * r * (S::one() - r);
            let daz = dz * z * (S::one() - z);
            let gxt = &mut gx_all[t * h3..(t + 1) * h3];
            gxt[j] = dar;
            gxt[h + j] = daz;
            gxt[2 * h + j] = dan;
            gh[j] = dar;
            gh[h + j] = daz;
            gh[2 * h + j] = dan * r;
        }
        for (o, &v) in gb_hh.iter_mut().zip(&gh) {
            *o += v;
        }
        // dW_hh += prevᵀ gh ; dh_prev += gh W_hhᵀ
        ops::matmul_tn_into(prev, &gh, &mut gw_hh, 1, h, h3);
        ops::matmul_nt_into(&gh, w_hh.data(), &mut dh_prev, 1, h3, h);
        dh_next = dh_prev;
    }
    let mut gw_ih = vec![S::zero(); d_in * h3];
    ops::matmul_tn_into(x.data(), &gx_all, &mut gw_ih, t_len, d_in, h3);
    let mut gxin = vec![S::zero(); t_len * d_in];
    ops::matmul_nt_into(&gx_all, w_ih.data(), &mut gxin, t_len, h3, d_in);
    let mut gb_ih = vec![S::zero(); h3];
    for t in 0..t_len {
        for (o, &v) in gb_ih.iter_mut().zip(&gx_all[t * h3..(t + 1) * h3]) {
            *o += v;
        }
    }
    GruGrads {
        x: Tensor::new(vec![t_len, d_in], gxin).expect("gru input grad shape"),
        w_ih: Tensor::new(vec![d_in, h3], gw_ih).expect("gru w_ih grad shape"),
        w_hh: Tensor::new(vec![h, h3], gw_hh).expect("gru w_hh grad shape"),
        b_ih: gb_ih,
        b_hh: gb_hh,
        h0: dh_next,
    }
}

/// Result of a reverse pass.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    bound: HashMap<usize, Var>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a recorded value, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter bound with [`Tape::bind`].
    pub fn bound(&self, key: usize) -> Option<&Tensor<S>> {
        self.bound.get(&key).and_then(|&v| self.wrt(v))
    }
}
