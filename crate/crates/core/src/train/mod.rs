//! Objective, optimization loop, validation and checkpoint/resume.

pub mod checkpoint;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, NamedTensor, TensorKind};

use crate::data::{DataError, Dataset, Split};
use crate::eval::{self, EvalConfig, EvalError, TokenJaccard};
use crate::model::{
    prepare_sample, LossParts, LossWeights, ModelConfig, Network, PerturbSchedule, PreparedSample, SampleSupervision,
};
use crate::optim::{AdamWConfig, AdamWState, OptimError, StepDecay};
use crate::rng::{stream, tag};
use crate::tensor::TensorError;
use crate::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {component} at epoch {epoch}, step {step}")]
    NonFinite {
        component: String,
        epoch: usize,
        step: u64,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: LossWeights,
    pub lr: f64,
    /// 1-based epoch from which the rate is multiplied by `decay_factor`.
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub d: usize,
    pub d_word: usize,
    pub heads: usize,
    pub sgpa_blocks: usize,
    pub gcn_layers: usize,
    pub max_snippets: usize,
    pub sgpa_residual: bool,
    pub alpha_max: f64,
    /// Perturb-rate warm-up as a fraction of all training steps.
    pub warmup_fraction: f64,
    pub beta_flip: f64,
    pub seed: u64,
    /// Validate every this many epochs (0 disables).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        let m = ModelConfig::desk(1);
        Self {
            lambda: LossWeights::default(),
            lr: 1e-3,
            decay_epoch: 21,
            decay_factor: 0.1,
            epochs: 30,
            batch_size: 16,
            weight_decay: 0.01,
            d: m.d,
            d_word: m.d_word,
            heads: m.heads,
            sgpa_blocks: m.sgpa_blocks,
            gcn_layers: m.gcn_layers,
            max_snippets: m.max_snippets,
            sgpa_residual: m.sgpa_residual,
            alpha_max: 0.8,
            warmup_fraction: 0.1,
            beta_flip: 0.2,
            seed: 0,
            val_every: 5,
        }
    }

    pub fn paper() -> Self {
        let m = ModelConfig::paper(1);
        Self {
            lr: 2e-4,
            decay_epoch: 51,
            epochs: 100,
            batch_size: 64,
            d: m.d,
            d_word: m.d_word,
            heads: m.heads,
            sgpa_blocks: m.sgpa_blocks,
            gcn_layers: m.gcn_layers,
            max_snippets: m.max_snippets,
            ..Self::desk()
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            d_word: self.d_word,
            heads: self.heads,
            sgpa_blocks: self.sgpa_blocks,
            gcn_layers: self.gcn_layers,
            max_snippets: self.max_snippets,
            vocab_size,
            bn_momentum: 0.1,
            sgpa_residual: self.sgpa_residual,
        }
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            base_lr: self.lr,
            factor: self.decay_factor,
            decay_epoch: self.decay_epoch,
        }
    }

    pub fn steps_per_epoch(&self, train_samples: usize) -> u64 {
        train_samples.div_ceil(self.batch_size.max(1)) as u64
    }

    pub fn perturb_schedule(&self, train_samples: usize) -> PerturbSchedule {
        let total = self.steps_per_epoch(train_samples) * self.epochs as u64;
        PerturbSchedule {
            alpha_max: self.alpha_max,
            warmup_steps: (self.warmup_fraction * total as f64).round() as u64,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let l = &self.lambda;
        let checks = [
            (l.seq > 0.0 && l.span > 0.0 && l.rec > 0.0 && l.align > 0.0, "loss weights must be positive"),
            (self.lr > 0.0 && self.lr.is_finite(), "lr must be positive"),
            (self.decay_factor > 0.0, "decay_factor must be positive"),
            (self.epochs > 0 && self.batch_size > 0, "epochs and batch_size must be positive"),
            (self.weight_decay >= 0.0, "weight_decay must be non-negative"),
            ((0.0..=1.0).contains(&self.alpha_max), "alpha_max must lie in [0, 1]"),
            ((0.0..=1.0).contains(&self.beta_flip), "beta_flip must lie in [0, 1]"),
            ((0.0..=1.0).contains(&self.warmup_fraction), "warmup_fraction must lie in [0, 1]"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(TrainError::Config(msg.into()));
            }
        }
        self.model_config(1).validate().map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// `λ₁L_Seq + λ₂L_Span + λ₃L_Span^rec + λ₄L_Align` with each span-type term
/// averaged over its start and end parts.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64, TrainError> {
    for (name, v) in parts.named() {
        if !v.is_finite() {
            return Err(TrainError::NonFinite {
                component: name.into(),
                epoch: 0,
                step: 0,
            });
        }
    }
    Ok(parts.weighted(w))
}

/// One metrics-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub step: u64,
    #[serde(rename = "L_Seq")]
    pub l_seq: f64,
    #[serde(rename = "L_Span")]
    pub l_span: f64,
    #[serde(rename = "L_rec")]
    pub l_rec: f64,
    #[serde(rename = "L_Align")]
    pub l_align: f64,
    pub total: f64,
    pub lr: f64,
}

/// Training state between steps.
pub struct Trainer<'a> {
    ds: &'a Dataset,
    pub cfg: TrainConfig,
    pub net: Network,
    pub opt: AdamWState<f64>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub best_val: Option<f64>,
    preps: Vec<PreparedSample>,
    perturb: PerturbSchedule,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a Dataset, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let net = Network::new(cfg.model_config(ds.vocab.len()), cfg.seed)?;
        let shapes: Vec<Vec<usize>> = net
            .params
            .trainable()
            .iter()
            .map(|&id| net.params.get(id).shape().to_vec())
            .collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let opt = AdamWState::new(
            AdamWConfig {
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            },
            &shape_refs,
        );
        Self::assemble(ds, cfg, net, opt, 0, 0, None)
    }

    fn assemble(
        ds: &'a Dataset,
        cfg: TrainConfig,
        net: Network,
        opt: AdamWState<f64>,
        epoch: usize,
        step: u64,
        best_val: Option<f64>,
    ) -> Result<Self, TrainError> {
        let train = ds.split_indices(Split::Train);
        if train.is_empty() {
            return Err(TrainError::Config("dataset has no training samples".into()));
        }
        let preps = train
            .par_iter()
            .map(|&k| prepare_sample(ds, k, cfg.max_snippets))
            .collect::<Result<Vec<_>, _>>()?;
        let perturb = cfg.perturb_schedule(preps.len());
        Ok(Self {
            ds,
            cfg,
            net,
            opt,
            epoch,
            step,
            best_val,
            preps,
            perturb,
        })
    }

    pub fn from_checkpoint(ds: &'a Dataset, ckpt: &Checkpoint) -> Result<Self, TrainError> {
        if ckpt.vocab_size != ds.vocab.len() {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint vocabulary {} differs from dataset vocabulary {}",
                ckpt.vocab_size,
                ds.vocab.len()
            )));
        }
        let net = load_network(ckpt)?;
        let trainable = net.params.trainable();
        let mut opt = AdamWState::new(
            AdamWConfig {
                weight_decay: ckpt.config.weight_decay,
                ..AdamWConfig::default()
            },
            &[],
        );
        for kind in [TensorKind::AdamM, TensorKind::AdamV] {
            let found: Vec<&NamedTensor> = ckpt.tensors_of(kind).collect();
            if found.len() != trainable.len() {
                return Err(TrainError::Checkpoint(format!("expected {} {kind:?} tensors", trainable.len())));
            }
            for (t, &id) in found.iter().zip(&trainable) {
                let entry = &net.params.entries()[id.index()];
                if t.name != entry.name || t.value.shape() != entry.value.shape() {
                    return Err(TrainError::Checkpoint(format!("optimizer tensor {} out of place", t.name)));
                }
            }
            let values = found.into_iter().map(|t| t.value.clone()).collect();
            match kind {
                TensorKind::AdamM => opt.m = values,
                _ => opt.v = values,
            }
        }
        opt.t = ckpt.adam_t;
        Self::assemble(ds, ckpt.config.clone(), net, opt, ckpt.epoch, ckpt.step, ckpt.best_val)
    }

    pub fn train_samples(&self) -> usize {
        self.preps.len()
    }

    /// One optimization step on training samples given by position in the
    /// training split.
    pub fn train_batch(&mut self, batch: &[usize], epoch: usize, lr: f64) -> Result<MetricRecord, TrainError> {
        let alpha = self.perturb.alpha(self.step);
        let preps: Vec<&PreparedSample> = batch.iter().map(|&i| &self.preps[i]).collect();
        let sups: Vec<SampleSupervision> = preps
            .iter()
            .map(|p| {
                let mut rng = stream(self.cfg.seed, &[tag::SAMPLE, self.step, p.sample as u64]);
                SampleSupervision::draw(p, alpha, self.cfg.beta_flip, &mut rng)
            })
            .collect();
        let out = self.net.batch_gradients(&preps, &sups, &self.cfg.lambda)?;
        let mean = LossParts::mean(&out.parts);
        let total = total_loss(&mean, &self.cfg.lambda).map_err(|e| match e {
            TrainError::NonFinite { component, .. } => TrainError::NonFinite {
                component,
                epoch,
                step: self.step,
            },
            other => other,
        })?;

        let trainable = self.net.params.trainable();
        let zeros: Vec<Option<Tensor>> = trainable
            .iter()
            .map(|&id| match out.grads[id.index()] {
                Some(_) => None,
                None => Some(Tensor::zeros(self.net.params.get(id).shape())),
            })
            .collect();
        let grads: Vec<&Tensor> = trainable
            .iter()
            .zip(&zeros)
            .map(|(&id, z)| out.grads[id.index()].as_ref().or(z.as_ref()).expect("gradient or zeros"))
            .collect();
        let names: Vec<String> = trainable
            .iter()
            .map(|&id| self.net.params.entries()[id.index()].name.clone())
            .collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut params: Vec<&mut Tensor> = self
            .net
            .params
            .entries_mut()
            .iter_mut()
            .filter(|e| e.trainable)
            .map(|e| &mut e.value)
            .collect();
        self.opt.step(&mut params, &grads, &name_refs, lr)?;
        self.net.update_running_stats(&out.bn_stats);
        self.step += 1;
        Ok(MetricRecord {
            epoch,
            step: self.step,
            l_seq: mean.seq,
            l_span: mean.span(),
            l_rec: mean.rec(),
            l_align: mean.align(),
            total,
            lr,
        })
    }

    /// Runs the next epoch over a seeded shuffle of the training split.
    pub fn run_epoch(&mut self) -> Result<Vec<MetricRecord>, TrainError> {
        let epoch = self.epoch + 1;
        let lr = self.cfg.schedule().lr(epoch);
        let mut order: Vec<usize> = (0..self.preps.len()).collect();
        order.shuffle(&mut stream(self.cfg.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut log = Vec::new();
        for batch in order.chunks(self.cfg.batch_size) {
            log.push(self.train_batch(batch, epoch, lr)?);
        }
        self.epoch = epoch;
        Ok(log)
    }

    /// Normal-protocol validation mIoU, if the dataset has a validation split.
    pub fn validate(&self) -> Result<Option<f64>, TrainError> {
        let val = self.ds.split_indices(Split::Val);
        if val.is_empty() {
            return Ok(None);
        }
        let located = eval::locate_samples(&self.net, self.ds, &val)?;
        let preds: Vec<_> = located.into_iter().map(|l| l.prediction).collect();
        let report = eval::evaluate_protocol(&preds, self.ds, &EvalConfig::default(), &TokenJaccard)?;
        Ok(Some(report.miou))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for e in self.net.params.entries() {
            tensors.push(NamedTensor {
                kind: if e.trainable { TensorKind::Param } else { TensorKind::Buffer },
                name: e.name.clone(),
                value: e.value.clone(),
            });
        }
        let trainable = self.net.params.trainable();
        for (kind, moments) in [(TensorKind::AdamM, &self.opt.m), (TensorKind::AdamV, &self.opt.v)] {
            for (&id, m) in trainable.iter().zip(moments) {
                tensors.push(NamedTensor {
                    kind,
                    name: self.net.params.entries()[id.index()].name.clone(),
                    value: m.clone(),
                });
            }
        }
        Checkpoint {
            config: self.cfg.clone(),
            vocab_size: self.net.config.vocab_size,
            epoch: self.epoch,
            step: self.step,
            adam_t: self.opt.t,
            best_val: self.best_val,
            tensors,
        }
    }
}

/// Rebuilds a network from a checkpoint's parameters and buffers.
pub fn load_network(ckpt: &Checkpoint) -> Result<Network, TrainError> {
    let mut net = Network::new(ckpt.config.model_config(ckpt.vocab_size), ckpt.config.seed)?;
    let stored: Vec<&NamedTensor> = ckpt
        .tensors
        .iter()
        .filter(|t| matches!(t.kind, TensorKind::Param | TensorKind::Buffer))
        .collect();
    if stored.len() != net.params.len() {
        return Err(TrainError::Checkpoint(format!(
            "checkpoint holds {} parameter tensors, model expects {}",
            stored.len(),
            net.params.len()
        )));
    }
    for t in stored {
        let id = net
            .params
            .find(&t.name)
            .ok_or_else(|| TrainError::Checkpoint(format!("unknown parameter {}", t.name)))?;
        let slot = net.params.get_mut(id);
        if slot.shape() != t.value.shape() {
            return Err(TrainError::Checkpoint(format!(
                "parameter {} has shape {:?}, model expects {:?}",
                t.name,
                t.value.shape(),
                slot.shape()
            )));
        }
        *slot = t.value.clone();
    }
    Ok(net)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Receives `metrics.ndjson`, `last.ckpt` and `best.ckpt`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed epochs instead of the configured count.
    pub stop_after_epoch: Option<usize>,
}

pub struct TrainOutcome {
    pub network: Network,
    pub log: Vec<MetricRecord>,
    pub checkpoint: Checkpoint,
    /// `(epoch, validation mIoU)` at each validation.
    pub validation: Vec<(usize, f64)>,
}

pub fn train(ds: &Dataset, cfg: TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome, TrainError> {
    let mut trainer = match &opts.resume {
        Some(c) => Trainer::from_checkpoint(ds, c)?,
        None => Trainer::new(ds, cfg)?,
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        if opts.resume.is_none() {
            fs::write(dir.join("metrics.ndjson"), b"")?;
        }
    }
    let last = opts.stop_after_epoch.unwrap_or(trainer.cfg.epochs).min(trainer.cfg.epochs);
    let mut log = Vec::new();
    let mut validation = Vec::new();
    while trainer.epoch < last {
        let records = trainer.run_epoch()?;
        let epoch = trainer.epoch;
        let mut val_line = None;
        if trainer.cfg.val_every > 0 && epoch % trainer.cfg.val_every == 0 {
            if let Some(miou) = trainer.validate()? {
                validation.push((epoch, miou));
                val_line = Some(miou);
                if trainer.best_val.map_or(true, |b| miou > b) {
                    trainer.best_val = Some(miou);
                    if let Some(dir) = &opts.out_dir {
                        trainer.checkpoint().save(dir.join("best.ckpt"))?;
                    }
                }
            }
        }
        if let Some(dir) = &opts.out_dir {
            let mut f = OpenOptions::new().append(true).create(true).open(dir.join("metrics.ndjson"))?;
            for r in &records {
                writeln!(f, "{}", serde_json::to_string(r).expect("record serializes"))?;
            }
            if let Some(miou) = val_line {
                writeln!(f, "{}", serde_json::json!({ "epoch": epoch, "val_mIoU": miou }))?;
            }
            trainer.checkpoint().save(dir.join("last.ckpt"))?;
        }
        log.extend(records);
    }
    let checkpoint = trainer.checkpoint();
    Ok(TrainOutcome {
        network: trainer.net,
        log,
        checkpoint,
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_dataset, GeneratorConfig};

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossParts::default(), &w).unwrap(), 0.0);
        let p = LossParts {
            seq: 0.2,
            ..LossParts::default()
        };
        assert!((total_loss(&p, &w).unwrap() - 1.0).abs() < 1e-12);
        let p = LossParts {
            seq: 0.1,
            span_s: 0.3,
            span_e: 0.3,
            rec_s: 0.2,
            rec_e: 0.2,
            align_s: 0.05,
            align_e: 0.05,
        };
        assert!((total_loss(&p, &w).unwrap() - 1.05).abs() < 1e-12);
        let bad = LossParts {
            rec_e: f64::NAN,
            ..LossParts::default()
        };
        match total_loss(&bad, &w) {
            Err(TrainError::NonFinite { component, .. }) => assert_eq!(component, "L_rec_e"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn paper_schedule_decays_at_51() {
        let s = TrainConfig::paper().schedule();
        assert_eq!(s.lr(50), 2e-4);
        assert!((s.lr(51) - 2e-5).abs() < 1e-20);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig::paper().validate().is_ok());
        let mut c = TrainConfig::desk();
        c.alpha_max = 1.5;
        assert!(c.validate().is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.lr, TrainConfig::desk().lr);
    }

    fn tiny() -> (Dataset, TrainConfig) {
        let ds = generate_synthetic_dataset(
            &GeneratorConfig {
                train_samples: 6,
                val_samples: 2,
                test_samples: 0,
                primitive_seconds: (0.5, 1.0),
                ..GeneratorConfig::default()
            },
            3,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            d: 8,
            d_word: 8,
            max_snippets: 10,
            val_every: 2,
            ..TrainConfig::desk()
        };
        (ds, cfg)
    }

    #[test]
    fn checkpoint_roundtrip_restores_trainer() {
        let (ds, cfg) = tiny();
        let mut t = Trainer::new(&ds, cfg).unwrap();
        t.run_epoch().unwrap();
        let c = t.checkpoint();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        let t2 = Trainer::from_checkpoint(&ds, &back).unwrap();
        assert_eq!(t2.net.params, t.net.params);
        assert_eq!(t2.opt, t.opt);
        assert_eq!((t2.epoch, t2.step), (t.epoch, t.step));
    }

    #[test]
    fn run_writes_outputs() {
        let (ds, cfg) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let out = train(
            &ds,
            cfg,
            &TrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(out.log.len(), 6);
        assert_eq!(out.validation.len(), 1);
        assert!(dir.path().join("last.ckpt").exists());
        assert!(dir.path().join("best.ckpt").exists());
        let text = fs::read_to_string(dir.path().join("metrics.ndjson")).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["epoch", "step", "L_Seq", "L_Span", "L_rec", "L_Align", "total", "lr"] {
            assert!(first.get(key).is_some(), "{key}");
        }
        for r in &out.log {
            let recomputed = 5.0 * r.l_seq + r.l_span + r.l_rec + r.l_align;
            assert!((recomputed - r.total).abs() < 1e-9);
            assert!(r.total >= 0.0);
        }
    }
}
