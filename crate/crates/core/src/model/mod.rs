//! The localization network: parameters, initialization and the tape-level
//! building blocks shared by the encoder, fusion, matcher and predictor.

pub mod encoders;
pub mod fusion;
pub mod matcher;
mod network;
pub mod predictor;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::rng::{stream, tag};
use crate::tensor::TensorError;
use crate::{Tape, Tensor};

pub use encoders::{Encoders, GcnLayer, SgpaBlock};
pub use fusion::Fusion;
pub use matcher::{perturbation_mask, LabelPrior, Matcher, PerturbSchedule};
pub use network::{
    prepare_query, prepare_sample, BatchOutput, LossParts, LossWeights, Network, PreparedSample, SampleForward, SampleLosses,
    SampleSupervision,
};
pub use predictor::{flip_labels, infer_span, Predictor, SpanPrediction};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden width `d`.
    pub d: usize,
    /// Word-embedding width.
    pub d_word: usize,
    pub heads: usize,
    pub sgpa_blocks: usize,
    pub gcn_layers: usize,
    /// Snippet count `S`; motions are pooled to at most this many steps.
    pub max_snippets: usize,
    pub vocab_size: usize,
    /// Momentum of the batch-norm running averages.
    pub bn_momentum: f64,
    /// Residual connection around every SGPA block. Without it, stacked
    /// attention averages away per-step detail.
    #[serde(default = "enabled")]
    pub sgpa_residual: bool,
}

fn enabled() -> bool {
    true
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d: 32,
            d_word: 32,
            heads: 2,
            sgpa_blocks: 2,
            gcn_layers: 3,
            max_snippets: 64,
            vocab_size,
            bn_momentum: 0.1,
            sgpa_residual: true,
        }
    }

    pub fn paper(vocab_size: usize) -> Self {
        Self {
            d: 256,
            d_word: 256,
            heads: 4,
            sgpa_blocks: 4,
            gcn_layers: 7,
            max_snippets: 256,
            vocab_size,
            bn_momentum: 0.1,
            sgpa_residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::Invalid { op: "model config", msg });
        if self.d == 0 || self.d_word == 0 || self.heads == 0 || self.max_snippets == 0 || self.vocab_size == 0 {
            return bad("widths, heads, snippet count and vocabulary must be positive".into());
        }
        if self.d % self.heads != 0 {
            return bad(format!("d={} not divisible by {} heads", self.d, self.heads));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum {} outside [0, 1]", self.bn_momentum));
        }
        Ok(())
    }
}

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

/// Named tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        (0..self.entries.len()).filter(|&i| self.entries[i].trainable).map(ParamId).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }
}

/// Initializer bound to one random stream.
pub(crate) struct Init<'a, R> {
    pub store: &'a mut ParamStore,
    pub rng: R,
}

impl<R: Rng> Init<'_, R> {
    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("init shape");
        self.store.add(name, t, true)
    }

    pub fn fill(&mut self, name: String, shape: &[usize], value: f64, trainable: bool) -> ParamId {
        self.store.add(name, Tensor::full(shape, value), trainable)
    }

    /// Fan-in scaled weight `[fan_in × fan_out]`.
    pub fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        self.uniform(name, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.weight(format!("{name}.w"), fan_in, fan_out),
            b: self.fill(format!("{name}.b"), &[fan_out], 0.0, true),
        }
    }
}

/// Affine map `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let b = cx.p(self.b);
        cx.tape.linear(x, w, b)
    }
}

/// A tape plus read access to the parameters it binds.
pub struct Ctx<'p> {
    pub tape: Tape,
    pub params: &'p ParamStore,
}

impl<'p> Ctx<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
        }
    }

    /// Records a parameter once per tape; repeated uses share the handle.
    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.bind(id.0, self.params.get(id))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }
}

/// Whether batch normalization uses batch statistics or running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Sinusoidal position table `[t × d]`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let k = (i / 2) as f64 * 2.0;
            let angle = pos as f64 / 10000f64.powf(k / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("position table shape")
}

pub(crate) fn init_rng(seed: u64) -> crate::rng::StreamRng {
    stream(seed, &[tag::INIT])
}
