//! AdamW optimisation with a warmup+cosine schedule, dispatching the loss by
//! fine-tuning method.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSets, MetricsRecord};
use crate::lora::{orthogonal_penalty, LoraAdapters, LoraConfig};
use crate::model::{decode, encode_with, forward_on_tape, CaptureSite, TransformerWeights};
use crate::objectives::{example_terms, total_loss, KlDirection, LossBreakdown, Method};
use crate::reference::ReferenceModel;
use crate::rng::{permutation, rng, Stream};
use crate::tasks::{EncodedExample, TrainExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    /// Weight of the input-span KL term.
    pub alpha: f64,
    /// Weight of the orthogonal or feature-alignment term.
    pub aux_weight: f64,
    /// Absent means full-parameter training.
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub kl_direction: KlDirection,
    pub reference_cache: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Lora,
            epochs: 10,
            batch_size: 8,
            peak_lr: 1e-4,
            min_lr: 0.0,
            weight_decay: 0.1,
            warmup_ratio: 0.05,
            alpha: 0.5,
            aux_weight: 0.1,
            lora: Some(LoraConfig::default()),
            seed: 0,
            grad_clip: Some(1.0),
            kl_direction: KlDirection::Forward,
            reference_cache: true,
        }
    }
}

impl TrainConfig {
    /// Full-parameter fine-tuning at the lower learning rate.
    pub fn sft() -> Self {
        TrainConfig {
            method: Method::Sft,
            peak_lr: 5e-5,
            lora: None,
            ..TrainConfig::default()
        }
    }

    /// From-scratch training of the base model on the general corpus.
    pub fn pretrain() -> Self {
        TrainConfig {
            method: Method::Sft,
            epochs: 20,
            batch_size: 16,
            peak_lr: 3e-3,
            min_lr: 1e-4,
            lora: None,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("train.warmup_ratio must lie in [0, 1), got {}", self.warmup_ratio));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("train.alpha must be finite and non-negative, got {}", self.alpha));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return bad(format!("train.aux_weight must be finite and non-negative, got {}", self.aux_weight));
        }
        if !(self.peak_lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return bad(format!("need 0 <= min_lr <= peak_lr and peak_lr > 0, got {} / {}", self.min_lr, self.peak_lr));
        }
        if self.weight_decay < 0.0 {
            return bad("train.weight_decay must be non-negative".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("train.grad_clip must be positive, got {c}"));
            }
        }
        match (&self.lora, self.method) {
            (Some(_), Method::Sft) => {
                return bad("method sft trains every parameter; remove the lora settings or pick a lora method".into())
            }
            (None, m) if m.uses_lora() => return bad(format!("method {m} needs lora settings")),
            (Some(l), _) => l.validate()?,
            _ => {}
        }
        if self.method == Method::LoraFeature(CaptureSite::Logits) {
            return bad("feature alignment at the logits is lora+selfaug".into());
        }
        Ok(())
    }
}

/// Learning rate for update `step` (1-based) out of `total_steps`: linear
/// warmup to the peak, then cosine decay to the minimum.
pub fn cosine_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = (cfg.warmup_ratio * total_steps as f64).round() as usize;
    if step < warmup {
        return cfg.peak_lr * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Moment buffers for every trainable tensor, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(shapes: &[&[usize]]) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One decoupled-decay AdamW update. `grads[i]` pairs with `params[i]`.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Vec<T>], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape("adamw", &[self.m.len()], &[params.len(), grads.len()]));
        }
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NanGradient {
                step: self.step + 1,
                param: format!("#{i}"),
            });
        }
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (c1, c2) = (1.0 - self.beta1.powi(self.step as i32), 1.0 - self.beta2.powi(self.step as i32));
        let step_size = T::of(lr / c1);
        let decay = T::of(1.0 - lr * weight_decay);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.numel() != g.len() {
                return Err(Error::shape("adamw grad", p.shape(), &[g.len()]));
            }
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                p[i] *= decay;
                p[i] -= step_size * m[i] / ((v[i] * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescale `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Mean loss components over one epoch of updates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Learning rate of the last update in the epoch.
    pub lr: f64,
}

#[derive(Serialize, Deserialize)]
struct ResumeMeta {
    config: TrainConfig,
    epoch: usize,
    step: u64,
    total_steps: usize,
}

/// Optimisation state for one run. Under LoRA methods the base weights stay
/// frozen; under SFT every base parameter is trained and there are no adapters.
pub struct Trainer {
    cfg: TrainConfig,
    weights: TransformerWeights<f32>,
    lora: Option<LoraAdapters<f32>>,
    reference: Option<Arc<ReferenceModel<f32>>>,
    opt: AdamW<f32>,
    train: Vec<EncodedExample>,
    epoch: usize,
    total_steps: usize,
    /// Every update's loss breakdown, in order.
    pub step_losses: Vec<LossBreakdown>,
}

impl Trainer {
    pub fn new(
        cfg: &TrainConfig,
        weights: TransformerWeights<f32>,
        train: &[TrainExample],
        reference: Option<Arc<ReferenceModel<f32>>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        if cfg.method.needs_reference() && reference.is_none() {
            return Err(Error::Config(format!("method {} needs a reference model", cfg.method)));
        }
        let lora = match &cfg.lora {
            Some(l) => Some(LoraAdapters::init(l, &weights.config, cfg.seed)?),
            None => None,
        };
        let shapes: Vec<Vec<usize>> = match &lora {
            Some(l) => l.params.named().iter().map(|(_, t)| t.shape().to_vec()).collect(),
            None => weights.params.named().iter().map(|(_, t)| t.shape().to_vec()).collect(),
        };
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let batches = train.len().div_ceil(cfg.batch_size);
        let encoded: Vec<EncodedExample> = train.iter().map(|e| e.encode()).collect();
        for (index, e) in encoded.iter().enumerate() {
            if e.tokens.len() > weights.config.max_seq_len {
                return Err(Error::Overflow {
                    index,
                    len: e.tokens.len(),
                    max: weights.config.max_seq_len,
                });
            }
        }
        Ok(Trainer {
            opt: AdamW::new(&shape_refs),
            cfg: cfg.clone(),
            weights,
            lora,
            reference,
            train: encoded,
            epoch: 0,
            total_steps: batches * cfg.epochs,
            step_losses: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &TransformerWeights<f32> {
        &self.weights
    }

    pub fn lora(&self) -> Option<&LoraAdapters<f32>> {
        self.lora.as_ref()
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn steps_done(&self) -> u64 {
        self.opt.step
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let seed = self.cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        permutation(&mut rng(seed, Stream::Shuffle), self.train.len())
    }

    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        if self.is_done() {
            return Err(Error::Config(format!("all {} epochs already run", self.cfg.epochs)));
        }
        let order = self.epoch_order(self.epoch);
        let mut sum = LossBreakdown::default();
        let mut lr = 0.0;
        let mut n = 0usize;
        for batch in order.chunks(self.cfg.batch_size) {
            let (loss, step_lr) = self.step(batch)?;
            sum.nll += loss.nll;
            sum.kl += loss.kl;
            sum.aux += loss.aux;
            sum.total += loss.total;
            lr = step_lr;
            n += 1;
        }
        self.epoch += 1;
        let k = n as f64;
        Ok(EpochSummary {
            epoch: self.epoch,
            loss: LossBreakdown {
                nll: sum.nll / k,
                kl: sum.kl / k,
                aux: sum.aux / k,
                total: sum.total / k,
                alpha: self.cfg.alpha,
                aux_weight: self.cfg.aux_weight,
            },
            lr,
        })
    }

    fn step(&mut self, batch: &[usize]) -> Result<(LossBreakdown, f64)> {
        let method = self.cfg.method;
        let full = method == Method::Sft;
        let capture = method.capture();
        let mut tape = Tape::<f32>::new();
        let base = self.weights.bind(&mut tape, full);
        let bound = self.lora.as_ref().map(|l| l.bind(&mut tape, true));

        let mut terms = Vec::with_capacity(batch.len());
        for &i in batch {
            let ex = &self.train[i];
            let out = forward_on_tape(&mut tape, &self.weights.config, &base, bound.as_ref(), &ex.tokens, capture)?;
            let reference = match (&self.reference, method.needs_reference()) {
                (Some(r), true) => Some(r.reference_logits(&ex.tokens, capture)?),
                _ => None,
            };
            let feats: Vec<Var> = out.features.iter().map(|&(_, v)| v).collect();
            terms.push(example_terms(
                &mut tape,
                method,
                out.logits,
                &feats,
                &ex.targets,
                &ex.masks,
                reference.as_deref().map(|r| r.view()),
                self.cfg.kl_direction,
            )?);
        }
        let ortho = match (&bound, method) {
            (Some(b), Method::LoraOrthogonal) => Some(orthogonal_penalty(&mut tape, &base, b)?),
            _ => None,
        };
        let loss = total_loss(&mut tape, method, &terms, ortho, self.cfg.alpha, self.cfg.aux_weight)?;
        tape.backward(loss.total)?;
        let breakdown = loss.breakdown(&tape);

        let named: Vec<(String, Var)> = match &bound {
            Some(b) => b.params.named().into_iter().map(|(n, &v)| (n, v)).collect(),
            None => base.named().into_iter().map(|(n, &v)| (n, v)).collect(),
        };
        let mut grads = Vec::with_capacity(named.len());
        for (name, v) in &named {
            let g = match tape.grad(*v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(*v).numel()],
            };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NanGradient {
                    step: self.opt.step + 1,
                    param: name.clone(),
                });
            }
            grads.push(g);
        }
        drop(tape);
        if let Some(c) = self.cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let lr = cosine_lr(self.opt.step as usize + 1, self.total_steps, &self.cfg);
        let mut slots = match &mut self.lora {
            Some(l) => l.params.slots_mut(),
            None => self.weights.params.slots_mut(),
        };
        self.opt.update(&mut slots, &grads, lr, self.cfg.weight_decay)?;
        self.step_losses.push(breakdown);
        Ok((breakdown, lr))
    }

    /// Everything needed to continue this run: weights, adapters, optimiser
    /// moments and the epoch counter.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let meta = ResumeMeta {
            config: self.cfg.clone(),
            epoch: self.epoch,
            step: self.opt.step,
            total_steps: self.total_steps,
        };
        let mut extra = Vec::with_capacity(self.opt.m.len() * 2);
        for (i, (m, v)) in self.opt.m.iter().zip(&self.opt.v).enumerate() {
            extra.push((format!("m/{i}"), m.clone()));
            extra.push((format!("v/{i}"), v.clone()));
        }
        let bytes = encode_with(&self.weights, self.lora.as_ref(), Some(serde_json::to_value(meta)?), &extra);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Rebuild a trainer from [`Trainer::save_state`] output. The training set
    /// and reference must be the ones the run started with.
    pub fn resume(path: &Path, train: &[TrainExample], reference: Option<Arc<ReferenceModel<f32>>>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = decode::<f32>(&bytes)?;
        let meta: ResumeMeta = serde_json::from_value(
            ckpt.meta
                .ok_or_else(|| Error::Checkpoint(format!("{} holds no trainer state", path.display())))?,
        )?;
        let mut t = Trainer::new(&meta.config, ckpt.weights, train, reference)?;
        if t.total_steps != meta.total_steps {
            return Err(Error::Checkpoint(format!(
                "training set gives {} steps, state was saved with {}",
                t.total_steps, meta.total_steps
            )));
        }
        t.lora = ckpt.lora;
        let n = t.opt.m.len();
        if ckpt.extra.len() != 2 * n {
            return Err(Error::Checkpoint(format!("expected {} moment tensors, found {}", 2 * n, ckpt.extra.len())));
        }
        for (name, tensor) in ckpt.extra {
            let (kind, idx) = name
                .split_once('/')
                .and_then(|(k, i)| i.parse::<usize>().ok().map(|i| (k.to_string(), i)))
                .ok_or_else(|| Error::Checkpoint(format!("bad optimiser tensor name {name}")))?;
            let slot = match kind.as_str() {
                "m" => t.opt.m.get_mut(idx),
                "v" => t.opt.v.get_mut(idx),
                _ => None,
            }
            .ok_or_else(|| Error::Checkpoint(format!("bad optimiser tensor name {name}")))?;
            if slot.shape() != tensor.shape() {
                return Err(Error::shape("optimiser moment", slot.shape(), tensor.shape()));
            }
            *slot = tensor;
        }
        t.opt.step = meta.step;
        t.epoch = meta.epoch;
        Ok(t)
    }

    pub fn into_parts(self) -> (TransformerWeights<f32>, Option<LoraAdapters<f32>>, Vec<LossBreakdown>) {
        (self.weights, self.lora, self.step_losses)
    }
}

/// One point of the pretraining learning curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct PretrainOutcome {
    pub weights: TransformerWeights<f32>,
    pub curve: Vec<CurvePoint>,
    pub probe_acc: f64,
    pub gate: f64,
}

impl PretrainOutcome {
    pub fn passed(&self) -> bool {
        self.probe_acc >= self.gate
    }

    /// Human-readable summary including a thinned learning curve.
    pub fn report(&self) -> String {
        let mut s = format!(
            "general probe accuracy {:.3} (gate {:.2}): {}\n",
            self.probe_acc,
            self.gate,
            if self.passed() { "pass" } else { "FAIL" }
        );
        let stride = (self.curve.len() / 20).max(1);
        for p in self.curve.iter().step_by(stride) {
            s.push_str(&format!("  step {:>6}  epoch {:>3}  loss {:.4}  lr {:.2e}\n", p.step, p.epoch, p.loss, p.lr));
        }
        s
    }
}

pub const PRETRAIN_GATE: f64 = 0.9;

/// Full-parameter NLL training of a fresh model on the general corpus,
/// scored on the general probe split.
pub fn pretrain(
    model: &crate::model::ModelConfig,
    train: &[TrainExample],
    probe: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<PretrainOutcome> {
    if cfg.method != Method::Sft {
        return Err(Error::Config(format!("pretraining uses method sft, got {}", cfg.method)));
    }
    let weights = TransformerWeights::init(model)?;
    let mut trainer = Trainer::new(cfg, weights, train, None)?;
    while !trainer.is_done() {
        trainer.run_epoch()?;
    }
    let epoch_len = train.len().div_ceil(cfg.batch_size);
    let curve = trainer
        .step_losses
        .iter()
        .enumerate()
        .map(|(i, l)| CurvePoint {
            step: i + 1,
            epoch: i / epoch_len + 1,
            loss: l.total,
            lr: cosine_lr(i + 1, trainer.total_steps, cfg),
        })
        .collect();
    let (weights, _, _) = trainer.into_parts();
    let probe_acc = crate::eval::eval_accuracy(&weights, None, probe)?;
    Ok(PretrainOutcome {
        weights,
        curve,
        probe_acc,
        gate: PRETRAIN_GATE,
    })
}

/// Output of a fine-tuning run.
pub struct FinetuneOutcome {
    pub weights: TransformerWeights<f32>,
    pub lora: Option<LoraAdapters<f32>>,
    /// Epoch 0 (before any update) through the final epoch.
    pub records: Vec<MetricsRecord>,
    pub step_losses: Vec<LossBreakdown>,
    pub reference_checksum: String,
}

/// Labels copied into every metrics row.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunLabels {
    pub ctx_len: usize,
}

/// Fine-tune from `base` with metrics before training and after every epoch.
/// The reference model is a frozen copy of `base`; its checksum is checked
/// after every epoch.
pub fn finetune(
    base: &TransformerWeights<f32>,
    train: &[TrainExample],
    sets: &EvalSets,
    cfg: &TrainConfig,
    labels: RunLabels,
) -> Result<FinetuneOutcome> {
    let reference = Arc::new(ReferenceModel::new(base.clone(), cfg.reference_cache));
    finetune_with(base, train, sets, cfg, labels, reference)
}

/// As [`finetune`], sharing an existing reference (and its cache).
pub fn finetune_with(
    base: &TransformerWeights<f32>,
    train: &[TrainExample],
    sets: &EvalSets,
    cfg: &TrainConfig,
    labels: RunLabels,
    reference: Arc<ReferenceModel<f32>>,
) -> Result<FinetuneOutcome> {
    let checksum = reference.checksum().to_string();
    let mut trainer = Trainer::new(cfg, base.clone(), train, Some(Arc::clone(&reference)))?;
    let mut records = vec![evaluate(&trainer, &reference, sets, None, labels)?];
    while !trainer.is_done() {
        let summary = trainer.run_epoch()?;
        reference.verify()?;
        records.push(evaluate(&trainer, &reference, sets, Some(&summary), labels)?);
    }
    let (weights, lora, step_losses) = trainer.into_parts();
    Ok(FinetuneOutcome {
        weights,
        lora,
        records,
        step_losses,
        reference_checksum: checksum,
    })
}
