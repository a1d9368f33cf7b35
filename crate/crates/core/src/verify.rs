//! Finite-difference gradient suite over every differentiable tape primitive
//! and the composed model submodules.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{finite_diff_check, GradCheckReport, REL_ERROR_FLOOR};
use crate::autodiff::Var;
use crate::model::encoders::{gcn_layer_forward, sgpa_block, GcnLayer, SgpaBlock};
use crate::model::fusion::{additive_attention_pool, attach_sentence, cqa_fuse};
use crate::model::matcher::{highlight_scores, seq_loss};
use crate::model::predictor::{condition_end_branch, predict_span, recover_forward, Boundary};
use crate::model::{Ctx, Fusion, Init, LabelPrior, Matcher, Mode, ParamStore, Predictor};
use crate::rng::{stream, StreamRng};
use crate::tensor::TensorError;
use crate::{Tape, Tensor};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub cases: usize,
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            cases: 20,
            eps: 1e-5,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteRow {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub coords: usize,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub eps: f64,
    pub tol: f64,
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(SuiteRow::passed)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<16} {:>6} {:>8} {:>12} {:>7}\n", "check", "cases", "coords", "max rel err", "result");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>6} {:>8} {:>12.3e} {:>7}\n",
                r.name,
                r.cases,
                r.coords,
                r.max_rel_error,
                if r.passed() { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

fn rand_tensor(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Values bounded away from zero, for kinked functions.
fn rand_away_from_zero(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    rand_tensor(rng, shape).map(|v| v.signum() * (0.1 + v.abs()))
}

fn rand_range(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

fn rand_mask(rng: &mut StreamRng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
    let keep = rng.gen_range(0..n);
    m[keep] = true;
    m
}

/// Reduces any output to a scalar through fixed random weights, so that
/// outputs with constant sums (softmax rows) still carry gradient.
fn project(t: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = t.constant(w.clone());
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Central-difference check of a submodule over its trainable parameters
/// and input tensors.
pub fn module_check<F>(store: &ParamStore, inputs: &[Tensor], f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut cx = Ctx::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| cx.constant(t.clone())).collect();
        let out = f(&mut cx, &vars)?;
        Ok(cx.tape.value(out).data()[0])
    };

    let mut cx = Ctx::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| cx.tape.leaf(t.clone(), true)).collect();
    let out = f(&mut cx, &vars)?;
    let grads = cx.tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coords: 0,
    };
    let mut record = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * eps);
        let abs = (analytic - numeric).abs();
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report
            .max_rel_error
            .max(abs / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR));
        report.coords += 1;
    };

    let mut work = store.clone();
    for id in store.trainable() {
        let g = grads.bound(id.index()).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for k in 0..g.len() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(&work, inputs)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(&work, inputs)?;
            work.get_mut(id).data_mut()[k] = orig;
            record(g.data()[k], plus, minus);
        }
    }
    let mut xs = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let g = grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in 0..g.len() {
            let orig = inputs[i].data()[k];
            xs[i].data_mut()[k] = orig + eps;
            let plus = eval(store, &xs)?;
            xs[i].data_mut()[k] = orig - eps;
            let minus = eval(store, &xs)?;
            xs[i].data_mut()[k] = orig;
            record(g.data()[k], plus, minus);
        }
    }
    Ok(report)
}

/// One randomized case: returns the check report for a fresh draw.
type CaseFn = fn(&mut StreamRng, f64) -> Result<GradCheckReport>;

fn dims(rng: &mut StreamRng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5))
}

fn unary(rng: &mut StreamRng, eps: f64, kinked: bool, op: fn(&mut Tape, Var) -> Var) -> Result<GradCheckReport> {
    let (m, n) = dims(rng);
    let x = if kinked {
        rand_away_from_zero(rng, &[m, n])
    } else {
        rand_tensor(rng, &[m, n]).map(|v| 2.0 * v)
    };
    let w = rand_tensor(rng, &[m, n]);
    finite_diff_check(
        &[x],
        |t, v| {
            let y = op(t, v[0]);
            project(t, y, &w)
        },
        eps,
    )
}

fn binary(
    rng: &mut StreamRng,
    eps: f64,
    shape_b: fn(usize, usize) -> Vec<usize>,
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let (m, n) = dims(rng);
    let a = rand_tensor(rng, &[m, n]);
    let b = rand_tensor(rng, &shape_b(m, n));
    let w = rand_tensor(rng, &[m, n]);
    finite_diff_check(
        &[a, b],
        |t, v| {
            let y = op(t, v[0], v[1])?;
            project(t, y, &w)
        },
        eps,
    )
}

fn primitive_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("matmul", |rng, eps| {
            let (m, k) = dims(rng);
            let n = rng.gen_range(1..5);
            let a = rand_tensor(rng, &[m, k]);
            let b = rand_tensor(rng, &[k, n]);
            let w = rand_tensor(rng, &[m, n]);
            finite_diff_check(
                &[a, b],
                |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    project(t, y, &w)
                },
                eps,
            )
        }),
        ("transpose", |rng, eps| {
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, &[m, n]);
            let w = rand_tensor(rng, &[n, m]);
            finite_diff_check(
                &[x],
                |t, v| {
                    let y = t.transpose(v[0])?;
                    project(t, y, &w)
                },
                eps,
            )
        }),
        ("add", |rng, eps| binary(rng, eps, |m, n| vec![m, n], |t, a, b| t.add(a, b))),
        ("sub", |rng, eps| binary(rng, eps, |m, n| vec![m, n], |t, a, b| t.sub(a, b))),
        ("mul", |rng, eps| binary(rng, eps, |m, n| vec![m, n], |t, a, b| t.mul(a, b))),
        ("add_row", |rng, eps| binary(rng, eps, |_, n| vec![n], |t, a, b| t.add_row(a, b))),
        ("mul_row", |rng, eps| binary(rng, eps, |_, n| vec![n], |t, a, b| t.mul_row(a, b))),
        ("add_col", |rng, eps| binary(rng, eps, |m, _| vec![m], |t, a, b| t.add_col(a, b))),
        ("mul_col", |rng, eps| binary(rng, eps, |m, _| vec![m], |t, a, b| t.mul_col(a, b))),
        ("scale", |rng, eps| {
            let c = rng.gen_range(-3.0..3.0);
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, &[m, n]);
            let w = rand_tensor(rng, &[m, n]);
            finite_diff_check(
                &[x],
                |t, v| {
                    let y = t.scale(v[0], c);
                    project(t, y, &w)
                },
                eps,
            )
        }),
        ("tanh", |rng, eps| unary(rng, eps, false, |t, x| t.tanh(x))),
        ("sigmoid", |rng, eps| unary(rng, eps, false, |t, x| t.sigmoid(x))),
        ("relu", |rng, eps| unary(rng, eps, true, |t, x| t.relu(x))),
        ("softmax", |rng, eps| {
            let (m, n) = dims(rng);
            let n = n + 1;
            let x = rand_tensor(rng, &[m, n]).map(|v| 3.0 * v);
            let mask = rand_mask(rng, n);
            let w = rand_tensor(rng, &[m, n]);
            finite_diff_check(
                &[x],
                |t, v| {
                    let y = t.softmax(v[0], Some(&mask))?;
                    project(t, y, &w)
                },
                eps,
            )
        }),
        ("layer_norm", |rng, eps| {
            let m = rng.gen_range(1..5);
            let n = rng.gen_range(2..6);
            let x = rand_tensor(rng, &[m, n]);
            let g = rand_tensor(rng, &[n]);
            let b = rand_tensor(rng, &[n]);
            let w = rand_tensor(rng, &[m, n]);
            finite_diff_check(
                &[x, g, b],
                |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    project(t, y, &w)
                },
                eps,
            )
        }),
        ("batch_norm", |rng, eps| {
            let m = rng.gen_range(2..7);
            let n = rng.gen_range(1..5);
            let x = rand_tensor(rng, &[m, n]);
            let g = rand_tensor(rng, &[n]);
            let b = rand_tensor(rng, &[n]);
            let w = rand_tensor(rng, &[m, n]);
            finite_diff_check(
                &[x, g, b],
                |t, v| {
                    let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5)?;
                    project(t, y, &w)
                },
                eps,
            )
        }),
        ("concat_cols", |rng, eps| {
            let (m, n) = dims(rng);
            let k = rng.gen_range(1..4);
            let a = rand_tensor(rng, &[m, n]);
            let b = rand_tensor(rng, &[m, k]);
            let w = rand_tensor(rng, &[m, n + k]);
            finite_diff_check(
                &[a, b],
                |t, v| {
                    let y = t.concat_cols(&[v[0], v[1]])?;
                    project(t, y, &w)
                },
                eps,
            )
        }),
        ("slice_cols", |rng, eps| {
            let m = rng.gen_range(1..5);
            let n = rng.gen_range(2..6);
            let start = rng.gen_range(0..n);
            let len = rng.gen_range(1..=n - start);
            let x = rand_tensor(rng, &[m, n]);
            let w = rand_tensor(rng, &[m, len]);
            finite_diff_check(
                &[x],
                |t, v| {
                    let y = t.slice_cols(v[0], start, len)?;
                    project(t, y, &w)
                },
                eps,
            )
        }),
        ("concat_rows", |rng, eps| {
            let (m, n) = dims(rng);
            let k = rng.gen_range(1..4);
            let a = rand_tensor(rng, &[m, n]);
            let b = rand_tensor(rng, &[k, n]);
            let w = rand_tensor(rng, &[m + k, n]);
            finite_diff_check(
                &[a, b],
                |t, v| {
                    let y = t.concat_rows(&[v[0], v[1]])?;
                    project(t, y, &w)
                },
                eps,
            )
        }),
        ("slice_rows", |rng, eps| {
            let m = rng.gen_range(2..6);
            let n = rng.gen_range(1..5);
            let start = rng.gen_range(0..m);
            let len = rng.gen_range(1..=m - start);
            let x = rand_tensor(rng, &[m, n]);
            let w = rand_tensor(rng, &[len, n]);
            finite_diff_check(
                &[x],
                |t, v| {
                    let y = t.slice_rows(v[0], start, len)?;
                    project(t, y, &w)
                },
                eps,
            )
        }),
        ("gather", |rng, eps| {
            let (m, n) = dims(rng);
            let k = rng.gen_range(1..7);
            let idx: Vec<usize> = (0..k).map(|_| rng.gen_range(0..m)).collect();
            let x = rand_tensor(rng, &[m, n]);
            let w = rand_tensor(rng, &[k, n]);
            finite_diff_check(
                &[x],
                |t, v| {
                    let y = t.gather(v[0], &idx)?;
                    project(t, y, &w)
                },
                eps,
            )
        }),
        ("repeat_rows", |rng, eps| {
            let n = rng.gen_range(1..5);
            let k = rng.gen_range(1..5);
            let x = rand_tensor(rng, &[1, n]);
            let w = rand_tensor(rng, &[k, n]);
            finite_diff_check(
                &[x],
                |t, v| {
                    let y = t.repeat_rows(v[0], k)?;
                    project(t, y, &w)
                },
                eps,
            )
        }),
        ("mean_rows", |rng, eps| {
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, &[m, n]);
            let w = rand_tensor(rng, &[1, n]);
            finite_diff_check(
                &[x],
                |t, v| {
                    let y = t.mean_rows(v[0])?;
                    let y = t.reshape(y, &[1, n])?;
                    project(t, y, &w)
                },
                eps,
            )
        }),
        ("block_mean_rows", |rng, eps| {
            let (e, n) = dims(rng);
            let b = rng.gen_range(1..4);
            let x = rand_tensor(rng, &[e * b, n]);
            let w = rand_tensor(rng, &[e, n]);
            finite_diff_check(
                &[x],
                |t, v| {
                    let y = t.block_mean_rows(v[0], b)?;
                    project(t, y, &w)
                },
                eps,
            )
        }),
        ("graph_mix", |rng, eps| {
            let (e, n) = dims(rng);
            let j = rng.gen_range(1..4);
            let adj = Arc::new(rand_tensor(rng, &[j, j]));
            let x = rand_tensor(rng, &[e * j, n]);
            let w = rand_tensor(rng, &[e * j, n]);
            finite_diff_check(
                &[x],
                |t, v| {
                    let y = t.graph_mix(v[0], Arc::clone(&adj))?;
                    project(t, y, &w)
                },
                eps,
            )
        }),
        ("reshape", |rng, eps| {
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, &[m, n]);
            let w = rand_tensor(rng, &[m * n]);
            finite_diff_check(
                &[x],
                |t, v| {
                    let y = t.reshape(v[0], &[m * n])?;
                    project(t, y, &w)
                },
                eps,
            )
        }),
        ("sum", |rng, eps| {
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, &[m, n]);
            finite_diff_check(
                &[x],
                |t, v| {
                    let y = t.mul(v[0], v[0])?;
                    Ok(t.sum(y))
                },
                eps,
            )
        }),
        ("mean", |rng, eps| {
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, &[m, n]);
            finite_diff_check(
                &[x],
                |t, v| {
                    let y = t.mul(v[0], v[0])?;
                    Ok(t.mean(y))
                },
                eps,
            )
        }),
        ("add_all", |rng, eps| {
            let k = rng.gen_range(1..5);
            let xs: Vec<Tensor> = (0..k).map(|_| rand_tensor(rng, &[1])).collect();
            let c: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            finite_diff_check(
                &xs,
                |t, v| {
                    let terms: Vec<Var> = v.iter().zip(&c).map(|(&x, &c)| t.scale(x, c)).collect();
                    let s = t.add_all(&terms)?;
                    let s2 = t.mul(s, s)?;
                    Ok(t.sum(s2))
                },
                eps,
            )
        }),
        ("linear", |rng, eps| {
            let (m, k) = dims(rng);
            let n = rng.gen_range(1..5);
            let x = rand_tensor(rng, &[m, k]);
            let wt = rand_tensor(rng, &[k, n]);
            let b = rand_tensor(rng, &[n]);
            let w = rand_tensor(rng, &[m, n]);
            finite_diff_check(
                &[x, wt, b],
                |t, v| {
                    let y = t.linear(v[0], v[1], v[2])?;
                    project(t, y, &w)
                },
                eps,
            )
        }),
        ("gru", |rng, eps| {
            let steps = rng.gen_range(1..5);
            let d_in = rng.gen_range(1..4);
            let h = rng.gen_range(1..4);
            let inputs = vec![
                rand_tensor(rng, &[steps, d_in]),
                rand_tensor(rng, &[d_in, 3 * h]),
                rand_tensor(rng, &[h, 3 * h]),
                rand_tensor(rng, &[3 * h]),
                rand_tensor(rng, &[3 * h]),
                rand_tensor(rng, &[h]),
            ];
            let w = rand_tensor(rng, &[steps, h]);
            finite_diff_check(
                &inputs,
                |t, v| {
                    let y = t.gru(v[0], v[1], v[2], v[3], v[4], v[5])?;
                    project(t, y, &w)
                },
                eps,
            )
        }),
        ("nll", |rng, eps| {
            let n = rng.gen_range(1..6);
            let target = rng.gen_range(0..n);
            let p = rand_range(rng, &[n], 0.05, 1.0);
            finite_diff_check(&[p], |t, v| t.nll(v[0], target), eps)
        }),
        ("bce", |rng, eps| {
            let n = rng.gen_range(1..6);
            let target: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let p = rand_range(rng, &[n], 0.05, 0.95);
            finite_diff_check(&[p], |t, v| t.bce(v[0], &target), eps)
        }),
        ("kl", |rng, eps| {
            let n = rng.gen_range(1..6);
            let p = rand_range(rng, &[n], 0.05, 1.0);
            let q = rand_range(rng, &[n], 0.05, 1.0);
            finite_diff_check(&[p, q], |t, v| t.kl(v[0], v[1]), eps)
        }),
    ]
}

fn fresh_store(rng: &mut StreamRng) -> (ParamStore, StreamRng) {
    let seed = rng.gen();
    (ParamStore::default(), stream(seed, &[]))
}

/// Random non-zero parameters, so zero-initialized biases and norms do not
/// hide gradient terms.
fn jitter(store: &mut ParamStore, rng: &mut StreamRng) {
    for e in store.entries_mut() {
        if e.trainable {
            for v in e.value.data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
    }
}

fn module_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("gcn_layer", |rng, eps| {
            let (mut store, prng) = fresh_store(rng);
            let j = rng.gen_range(2..4);
            let e = rng.gen_range(1..3);
            let d_in = rng.gen_range(1..4);
            let d = rng.gen_range(1..4);
            let layer = GcnLayer::init(&mut Init { store: &mut store, rng: prng }, "g", d_in, d);
            jitter(&mut store, rng);
            let adj = Arc::new(rand_range(rng, &[j, j], 0.0, 1.0));
            let x = rand_tensor(rng, &[e * j, d_in]);
            let w = rand_tensor(rng, &[e * j, d]);
            module_check(
                &store,
                &[x],
                |cx, v| {
                    let (y, _) = gcn_layer_forward(cx, &layer, v[0], &adj, Mode::Train)?;
                    project(&mut cx.tape, y, &w)
                },
                eps,
            )
        }),
        ("sgpa_block", |rng, eps| {
            let (mut store, prng) = fresh_store(rng);
            let heads = rng.gen_range(1..3);
            let d = heads * rng.gen_range(1..3);
            let t = rng.gen_range(1..4);
            let n = rng.gen_range(1..4);
            let block = SgpaBlock::init(&mut Init { store: &mut store, rng: prng }, "s", d);
            jitter(&mut store, rng);
            let x_mask = rand_mask(rng, t);
            let c_mask = rand_mask(rng, n);
            let x = rand_tensor(rng, &[t, d]);
            let c = rand_tensor(rng, &[n, d]);
            let w = rand_tensor(rng, &[t, d]);
            module_check(
                &store,
                &[x, c],
                |cx, v| {
                    let y = sgpa_block(cx, &block, heads, v[0], v[1], Some(&x_mask), Some(&c_mask))?;
                    project(&mut cx.tape, y, &w)
                },
                eps,
            )
        }),
        ("cqa", |rng, eps| {
            let (mut store, prng) = fresh_store(rng);
            let d = rng.gen_range(1..4);
            let t = rng.gen_range(1..4);
            let n = rng.gen_range(1..4);
            let f = Fusion::init(&mut Init { store: &mut store, rng: prng }, d);
            jitter(&mut store, rng);
            let m_mask = rand_mask(rng, t);
            let q_mask = rand_mask(rng, n);
            let m = rand_tensor(rng, &[t, d]);
            let q = rand_tensor(rng, &[n, d]);
            let w = rand_tensor(rng, &[t, d]);
            module_check(
                &store,
                &[m, q],
                |cx, v| {
                    let fused = cqa_fuse(cx, &f, v[0], v[1], Some(&m_mask), Some(&q_mask))?;
                    let s = additive_attention_pool(cx, &f, v[1], Some(&q_mask))?;
                    let y = attach_sentence(cx, &f, fused, s)?;
                    project(&mut cx.tape, y, &w)
                },
                eps,
            )
        }),
        ("matcher", |rng, eps| {
            let (mut store, prng) = fresh_store(rng);
            let d = rng.gen_range(1..5);
            let t = rng.gen_range(1..6);
            let m = Matcher::init(&mut Init { store: &mut store, rng: prng }, d);
            jitter(&mut store, rng);
            let highlight: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.4)).collect();
            let mask = rand_mask(rng, t);
            let mq = rand_tensor(rng, &[t, d]);
            module_check(
                &store,
                &[mq],
                |cx, v| {
                    let prior = LabelPrior::Perturbed {
                        highlight: &highlight,
                        mask: &mask,
                    };
                    let s = highlight_scores(cx, &m, v[0], prior)?;
                    seq_loss(cx, s, &highlight)
                },
                eps,
            )
        }),
        ("predictor_loss", |rng, eps| {
            let (mut store, prng) = fresh_store(rng);
            let d = rng.gen_range(1..4);
            let t = rng.gen_range(1..5);
            let p = Predictor::init(&mut Init { store: &mut store, rng: prng }, d);
            jitter(&mut store, rng);
            let i_s = rng.gen_range(0..t);
            let i_e = rng.gen_range(i_s..t);
            let flip_s: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.3)).collect();
            let flip_e: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.3)).collect();
            let x = rand_tensor(rng, &[t, d]);
            // the recovering distributions enter the alignment term as
            // constants, so take them at the unperturbed point
            let (rec_s, rec_e) = {
                let mut cx = Ctx::new(&store);
                let xv = cx.constant(x.clone());
                let s = predict_span(&mut cx, &p, xv, Boundary::Start)?;
                let e_in = condition_end_branch(&mut cx, &p, xv, s.hidden)?;
                let rs = recover_forward(&mut cx, &p, xv, &flip_s, Boundary::Start)?;
                let re = recover_forward(&mut cx, &p, e_in, &flip_e, Boundary::End)?;
                (cx.tape.value(rs).clone(), cx.tape.value(re).clone())
            };
            module_check(
                &store,
                &[x],
                |cx, v| {
                    let s = predict_span(cx, &p, v[0], Boundary::Start)?;
                    let e_in = condition_end_branch(cx, &p, v[0], s.hidden)?;
                    let e = predict_span(cx, &p, e_in, Boundary::End)?;
                    let rs = recover_forward(cx, &p, v[0], &flip_s, Boundary::Start)?;
                    let re = recover_forward(cx, &p, e_in, &flip_e, Boundary::End)?;
                    let cs = cx.constant(rec_s.clone());
                    let ce = cx.constant(rec_e.clone());
                    let terms = [
                        cx.tape.nll(s.probs, i_s)?,
                        cx.tape.nll(e.probs, i_e)?,
                        cx.tape.nll(rs, i_s)?,
                        cx.tape.nll(re, i_e)?,
                        cx.tape.kl(s.probs, cs)?,
                        cx.tape.kl(e.probs, ce)?,
                    ];
                    cx.tape.add_all(&terms)
                },
                eps,
            )
        }),
    ]
}

/// Names of every check the suite runs, primitives first.
pub fn check_names() -> Vec<&'static str> {
    primitive_cases().into_iter().chain(module_cases()).map(|(n, _)| n).collect()
}

pub fn run_gradient_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let mut rows = Vec::new();
    for (ci, (name, case)) in primitive_cases().into_iter().chain(module_cases()).enumerate() {
        let mut rng = stream(cfg.seed, &[ci as u64]);
        let mut row = SuiteRow {
            name: name.to_string(),
            cases: cfg.cases,
            failures: 0,
            max_rel_error: 0.0,
            coords: 0,
        };
        for _ in 0..cfg.cases {
            let r = case(&mut rng, cfg.eps)?;
            row.max_rel_error = row.max_rel_error.max(r.max_rel_error);
            row.coords += r.coords;
            if !r.passes(cfg.tol) {
                row.failures += 1;
            }
        }
        rows.push(row);
    }
    Ok(SuiteReport {
        eps: cfg.eps,
        tol: cfg.tol,
        rows,
    })
}
