//! Exact-match accuracy, the input-logit shift probe, and the experiment
//! sweeps built on top of them.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tape};
use crate::error::{Error, Result};
use crate::lora::LoraAdapters;
use crate::model::{argmax_lowest, forward, CaptureSite, TransformerWeights};
use crate::objectives::{kl_input_alignment, KlDirection, Method};
use crate::reference::ReferenceModel;
use crate::tasks::{gen_rag, Corpus, TaskSpec, TrainExample};
use crate::train::{finetune_with, EpochSummary, FinetuneOutcome, RunLabels, TrainConfig, Trainer};

/// One row of the per-epoch metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub method: String,
    pub alpha: f64,
    pub rank: Option<usize>,
    pub ctx_len: usize,
    pub seed: u64,
    pub downstream_acc: f64,
    pub retention_acc: f64,
    pub mean_input_kl: f64,
    /// Training-loss means over the epoch; empty for epoch 0.
    pub nll: Option<f64>,
    pub kl: Option<f64>,
    pub aux: Option<f64>,
    pub lr: Option<f64>,
}

pub const METRICS_COLUMNS: [&str; 13] = [
    "epoch",
    "method",
    "alpha",
    "rank",
    "ctx_len",
    "seed",
    "downstream_acc",
    "retention_acc",
    "mean_input_kl",
    "nll",
    "kl",
    "aux",
    "lr",
];

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(METRICS_COLUMNS)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Probe sets shared by every epoch of a run.
#[derive(Clone, Debug, Default)]
pub struct EvalSets {
    /// rag_qa probe examples, scored by exact match.
    pub downstream: Vec<TrainExample>,
    /// General-instruction probe examples never used in fine-tuning.
    pub retention: Vec<TrainExample>,
    /// Held-out rag_qa inputs for the input-logit KL probe.
    pub shift: Vec<TrainExample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub downstream_probe: usize,
    pub retention_probe: usize,
    pub shift_probe: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            downstream_probe: 100,
            retention_probe: 200,
            shift_probe: 50,
            seeds: vec![0, 1, 2],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downstream_probe == 0 || self.retention_probe == 0 || self.shift_probe == 0 {
            return Err(Error::Config("eval probe sizes must be positive".into()));
        }
        Ok(())
    }
}

impl EvalSets {
    /// Take the leading probe examples from each corpus. The shift probe uses
    /// the downstream probe inputs, which fine-tuning never sees.
    pub fn new(general: &Corpus, downstream: &Corpus, cfg: &EvalConfig) -> Result<Self> {
        cfg.validate()?;
        let take = |v: &[TrainExample], n: usize, what: &str| {
            if v.len() < n {
                Err(Error::Config(format!("{what} probe wants {n} examples, corpus has {}", v.len())))
            } else {
                Ok(v[..n].to_vec())
            }
        };
        Ok(EvalSets {
            downstream: take(&downstream.probe, cfg.downstream_probe, "downstream")?,
            retention: take(&general.probe, cfg.retention_probe, "retention")?,
            shift: take(&downstream.probe, cfg.shift_probe, "shift")?,
        })
    }
}

/// Fraction of probe examples whose greedy continuation of the prompt is
/// exactly the gold response followed by EOS.
pub fn eval_accuracy<T: Real>(
    weights: &TransformerWeights<T>,
    lora: Option<&LoraAdapters<T>>,
    probe: &[TrainExample],
) -> Result<f64> {
    if probe.is_empty() {
        return Err(Error::Config("empty probe set".into()));
    }
    let mut correct = 0usize;
    for ex in probe {
        if decodes_exactly(weights, lora, ex)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / probe.len() as f64)
}

/// Whether greedy decoding from the prompt reproduces the gold response and
/// then stops. Greedy output matches gold iff every teacher-forced argmax on
/// the response span does, so one forward pass suffices.
pub fn decodes_exactly<T: Real>(
    weights: &TransformerWeights<T>,
    lora: Option<&LoraAdapters<T>>,
    ex: &TrainExample,
) -> Result<bool> {
    let enc = ex.encode();
    let (logits, _) = forward(weights, lora, &enc.tokens, None)?;
    Ok(enc
        .masks
        .response_positions()
        .into_iter()
        .all(|i| argmax_lowest(logits.row(i)) == enc.targets[i]))
}

/// Mean over probe examples of the input-span KL between student and
/// reference, evaluated without gradients in 64-bit.
pub fn measure_shift<T: Real>(
    weights: &TransformerWeights<T>,
    lora: Option<&LoraAdapters<T>>,
    reference: &ReferenceModel<T>,
    probe: &[TrainExample],
) -> Result<f64> {
    if probe.is_empty() {
        return Err(Error::Config("empty probe set".into()));
    }
    let mut total = 0.0;
    for ex in probe {
        let enc = ex.encode();
        let (student, _) = forward(weights, lora, &enc.tokens, None)?;
        let r = reference.reference_logits(&enc.tokens, None)?;
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(student.cast());
        let kl = kl_input_alignment(&mut tape, s, &r.logits.cast(), &enc.masks, KlDirection::Forward)?;
        total += tape.value(kl).item();
    }
    Ok(total / probe.len() as f64)
}

/// Metrics for the trainer's current state.
pub fn evaluate(
    trainer: &Trainer,
    reference: &ReferenceModel<f32>,
    sets: &EvalSets,
    summary: Option<&EpochSummary>,
    labels: RunLabels,
) -> Result<MetricsRecord> {
    let cfg = trainer.config();
    let (w, l) = (trainer.weights(), trainer.lora());
    Ok(MetricsRecord {
        epoch: trainer.epoch(),
        method: cfg.method.to_string(),
        alpha: if cfg.method == Method::LoraSelfAug { cfg.alpha } else { 0.0 },
        rank: cfg.lora.as_ref().map(|l| l.rank),
        ctx_len: labels.ctx_len,
        seed: cfg.seed,
        downstream_acc: eval_accuracy(w, l, &sets.downstream)?,
        retention_acc: eval_accuracy(w, l, &sets.retention)?,
        mean_input_kl: measure_shift(w, l, reference, &sets.shift)?,
        nll: summary.map(|s| s.loss.nll),
        kl: summary.map(|s| s.loss.kl),
        aux: summary.map(|s| s.loss.aux),
        lr: summary.map(|s| s.lr),
    })
}

/// A pretrained base plus the corpora a family of fine-tunes draws from.
#[derive(Clone)]
pub struct Experiment {
    pub base: TransformerWeights<f32>,
    pub general: Corpus,
    /// Downstream rag_qa spec at the default context length. The context
    /// sweep rebuilds documents from it via [`TaskSpec::rag_for_ctx`].
    pub downstream: TaskSpec,
    pub ctx_len: usize,
    pub eval: EvalConfig,
}

/// Training examples and probes for one context length.
pub struct RunData {
    pub train: Vec<TrainExample>,
    pub sets: EvalSets,
}

impl Experiment {
    pub fn data_for(&self, ctx_len: usize) -> Result<RunData> {
        let base = TaskSpec::rag_for_ctx(self.downstream.seed, self.downstream.n_examples, ctx_len);
        let spec = TaskSpec {
            distractor_rate: self.downstream.distractor_rate,
            unanswerable_rate: self.downstream.unanswerable_rate,
            ..base
        };
        let spec = if ctx_len == self.ctx_len && self.downstream.n_docs > 0 {
            TaskSpec {
                n_docs: self.downstream.n_docs,
                doc_len: self.downstream.doc_len,
                ..spec
            }
        } else {
            spec
        };
        let corpus = gen_rag(&spec, self.base.config.max_seq_len)?;
        let sets = EvalSets::new(&self.general, &corpus, &self.eval)?;
        Ok(RunData {
            train: corpus.train,
            sets,
        })
    }

    pub fn reference(&self, cache: bool) -> Arc<ReferenceModel<f32>> {
        Arc::new(ReferenceModel::new(self.base.clone(), cache))
    }

    pub fn run(&self, cfg: &TrainConfig, ctx_len: usize, reference: Arc<ReferenceModel<f32>>) -> Result<FinetuneOutcome> {
        let data = self.data_for(ctx_len)?;
        finetune_with(&self.base, &data.train, &data.sets, cfg, RunLabels { ctx_len }, reference)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    Rank,
    CtxLen,
    Method,
    Position,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Rank => "rank",
            SweepAxis::CtxLen => "ctx_len",
            SweepAxis::Method => "method",
            SweepAxis::Position => "position",
        }
    }

    pub fn hypothesis(self) -> &'static str {
        match self {
            SweepAxis::Alpha => {
                "seed-mean retention_acc nondecreasing and mean_input_kl nonincreasing in alpha (at most one inversion each)"
            }
            SweepAxis::Rank => "seed-mean mean_input_kl increases with rank (at most one inversion)",
            SweepAxis::CtxLen => "seed-mean retention_acc nonincreasing as context grows",
            SweepAxis::Method => "lora+selfaug has the lowest seed-mean mean_input_kl and sft's is at least lora's",
            SweepAxis::Position => "site=logits has the highest seed-mean retention_acc",
        }
    }

    /// Values used when the config names none.
    pub fn default_values(self) -> Vec<SweepValue> {
        match self {
            SweepAxis::Alpha => [0.0, 0.1, 0.3, 0.5, 1.0].map(SweepValue::Alpha).to_vec(),
            SweepAxis::Rank => [2, 8, 32].map(SweepValue::Rank).to_vec(),
            SweepAxis::CtxLen => crate::tasks::CTX_LENS.map(SweepValue::CtxLen).to_vec(),
            SweepAxis::Method => [Method::Sft, Method::Lora, Method::LoraOrthogonal, Method::LoraSelfAug]
                .map(SweepValue::Method)
                .to_vec(),
            SweepAxis::Position => CaptureSite::ALL.map(SweepValue::Position).to_vec(),
        }
    }

    pub fn parse_value(self, s: &str) -> Result<SweepValue> {
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("bad {} value '{s}'", self.name())));
        let int = |s: &str| s.parse::<usize>().map_err(|_| Error::Config(format!("bad {} value '{s}'", self.name())));
        Ok(match self {
            SweepAxis::Alpha => SweepValue::Alpha(num(s)?),
            SweepAxis::Rank => SweepValue::Rank(int(s)?),
            SweepAxis::CtxLen => SweepValue::CtxLen(int(s)?),
            SweepAxis::Method => SweepValue::Method(s.parse()?),
            SweepAxis::Position => SweepValue::Position(s.parse()?),
        })
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SweepAxis::Alpha, SweepAxis::Rank, SweepAxis::CtxLen, SweepAxis::Method, SweepAxis::Position]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep axis '{s}' (alpha, rank, ctx_len, method, position)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SweepValue {
    Alpha(f64),
    Rank(usize),
    CtxLen(usize),
    Method(Method),
    Position(CaptureSite),
}

impl SweepValue {
    pub fn axis(self) -> SweepAxis {
        match self {
            SweepValue::Alpha(_) => SweepAxis::Alpha,
            SweepValue::Rank(_) => SweepAxis::Rank,
            SweepValue::CtxLen(_) => SweepAxis::CtxLen,
            SweepValue::Method(_) => SweepAxis::Method,
            SweepValue::Position(_) => SweepAxis::Position,
        }
    }

    fn sort_key(self) -> (f64, usize) {
        match self {
            SweepValue::Alpha(a) => (a, 0),
            SweepValue::Rank(r) | SweepValue::CtxLen(r) => (r as f64, 0),
            SweepValue::Method(m) => {
                let order = [Method::Sft, Method::Lora, Method::LoraOrthogonal, Method::LoraSelfAug];
                (0.0, order.iter().position(|&o| o == m).unwrap_or(order.len()))
            }
            SweepValue::Position(s) => (0.0, CaptureSite::ALL.iter().position(|&o| o == s).unwrap_or(0)),
        }
    }

    /// Training config and context length for this point.
    ///
    /// Rank points keep the adapter multiplier `scale / rank` of the base
    /// config, so the adapter's initial update size is rank-independent.
    pub fn apply(self, base: &TrainConfig, ctx_len: usize) -> Result<(TrainConfig, usize)> {
        let mut cfg = base.clone();
        let mut ctx = ctx_len;
        match self {
            SweepValue::Alpha(a) => {
                cfg.method = Method::LoraSelfAug;
                cfg.alpha = a;
            }
            SweepValue::Rank(r) => {
                let lora = cfg
                    .lora
                    .as_mut()
                    .ok_or_else(|| Error::Config(format!("rank sweep needs a lora method, base is {}", base.method)))?;
                let mult = lora.multiplier();
                lora.rank = r;
                lora.scale = mult * r as f64;
            }
            SweepValue::CtxLen(c) => ctx = c,
            SweepValue::Method(m) => {
                cfg.method = m;
                if m == Method::Sft {
                    cfg.lora = None;
                    cfg.peak_lr = TrainConfig::sft().peak_lr;
                } else if cfg.lora.is_none() {
                    cfg.lora = Some(Default::default());
                    cfg.peak_lr = TrainConfig::default().peak_lr;
                }
            }
            SweepValue::Position(site) => cfg.method = Method::for_site(site),
        }
        cfg.validate()?;
        Ok((cfg, ctx))
    }
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Alpha(a) => write!(f, "{a}"),
            SweepValue::Rank(r) | SweepValue::CtxLen(r) => write!(f, "{r}"),
            SweepValue::Method(m) => write!(f, "{m}"),
            SweepValue::Position(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single seed.
    pub sd: f64,
    pub best: f64,
}

impl Stat {
    /// `higher_is_better` picks whether `best` is the max or the min.
    pub fn of(xs: &[f64], higher_is_better: bool) -> Stat {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let best = if higher_is_better {
            xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        } else {
            xs.iter().copied().fold(f64::INFINITY, f64::min)
        };
        Stat { mean, sd, best }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub value: String,
    pub seeds: usize,
    pub downstream_acc: Stat,
    pub retention_acc: Stat,
    pub mean_input_kl: Stat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: SweepValue,
    /// Final-epoch record of each seed, in seed order.
    pub runs: Vec<MetricsRecord>,
}

impl SweepPoint {
    pub fn summary(&self) -> PointSummary {
        let col = |f: fn(&MetricsRecord) -> f64| self.runs.iter().map(f).collect::<Vec<_>>();
        PointSummary {
            value: self.value.to_string(),
            seeds: self.runs.len(),
            downstream_acc: Stat::of(&col(|r| r.downstream_acc), true),
            retention_acc: Stat::of(&col(|r| r.retention_acc), true),
            mean_input_kl: Stat::of(&col(|r| r.mean_input_kl), false),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    /// Set when a sub-run failed; holds its error message. Points completed
    /// before the failure are kept.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub axis: SweepAxis,
    pub hypothesis: String,
    /// `pass`, `fail` or `partial`.
    pub verdict: String,
    pub points: Vec<PointSummary>,
}

/// Adjacent pairs of `xs` that break the order `ok(prev, next)`.
pub fn inversions(xs: &[f64], ok: impl Fn(f64, f64) -> bool) -> usize {
    xs.windows(2).filter(|w| !ok(w[0], w[1])).count()
}

/// Directional check of the axis hypothesis on point summaries (sorted by axis value).
pub fn verdict(axis: SweepAxis, points: &[PointSummary]) -> bool {
    let col = |f: fn(&PointSummary) -> f64| points.iter().map(f).collect::<Vec<_>>();
    let ret = col(|p| p.retention_acc.mean);
    let kl = col(|p| p.mean_input_kl.mean);
    let find = |name: &str| points.iter().find(|p| p.value == name);
    match axis {
        SweepAxis::Alpha => inversions(&ret, |a, b| b >= a) <= 1 && inversions(&kl, |a, b| b <= a) <= 1,
        SweepAxis::Rank => inversions(&kl, |a, b| b > a) <= 1,
        SweepAxis::CtxLen => inversions(&ret, |a, b| b <= a) == 0,
        SweepAxis::Position => match find("logits") {
            Some(best) => points.iter().all(|p| p.retention_acc.mean <= best.retention_acc.mean),
            None => false,
        },
        SweepAxis::Method => match (find("sft"), find("lora"), find("lora+selfaug")) {
            (Some(sft), Some(lora), Some(sa)) => {
                sft.mean_input_kl.mean >= lora.mean_input_kl.mean
                    && points.iter().all(|p| sa.mean_input_kl.mean <= p.mean_input_kl.mean)
            }
            _ => false,
        },
    }
}

impl SweepResult {
    pub fn summary(&self) -> SweepSummary {
        let points: Vec<PointSummary> = self.points.iter().map(SweepPoint::summary).collect();
        let verdict = match &self.failure {
            Some(_) => "partial",
            None if verdict(self.axis, &points) => "pass",
            None => "fail",
        };
        SweepSummary {
            axis: self.axis,
            hypothesis: self.axis.hypothesis().to_string(),
            verdict: verdict.to_string(),
            points,
        }
    }

    /// One row per (value, seed): `axis,value` followed by the metrics columns.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["axis", "value"];
        header.extend(METRICS_COLUMNS);
        w.write_record(&header)?;
        for p in &self.points {
            for r in &p.runs {
                let mut row = vec![self.axis.to_string(), p.value.to_string()];
                row.extend(record_fields(r));
                w.write_record(&row)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn record_fields(r: &MetricsRecord) -> Vec<String> {
    vec![
        r.epoch.to_string(),
        r.method.clone(),
        r.alpha.to_string(),
        r.rank.map_or_else(String::new, |v| v.to_string()),
        r.ctx_len.to_string(),
        r.seed.to_string(),
        r.downstream_acc.to_string(),
        r.retention_acc.to_string(),
        r.mean_input_kl.to_string(),
        opt(r.nll),
        opt(r.kl),
        opt(r.aux),
        opt(r.lr),
    ]
}

/// Rebuild a sweep from its CSV. Rows are grouped by value in file order.
pub fn read_sweep_csv(path: &Path) -> Result<SweepResult> {
    #[derive(Deserialize)]
    struct Row {
        axis: String,
        value: String,
        #[serde(flatten)]
        record: MetricsRecord,
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut axis: Option<SweepAxis> = None;
    let mut points: Vec<SweepPoint> = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row?;
        let a: SweepAxis = row.axis.parse()?;
        if *axis.get_or_insert(a) != a {
            return Err(Error::Config(format!("{} mixes sweep axes", path.display())));
        }
        let value = a.parse_value(&row.value)?;
        match points.iter_mut().find(|p| p.value.to_string() == value.to_string()) {
            Some(p) => p.runs.push(row.record),
            None => points.push(SweepPoint {
                value,
                runs: vec![row.record],
            }),
        }
    }
    let axis = axis.ok_or_else(|| Error::Config(format!("{} has no sweep rows", path.display())))?;
    Ok(SweepResult {
        axis,
        points,
        failure: None,
    })
}

/// Sweep options beyond the base training config.
#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub seeds: Vec<u64>,
    /// Concurrent sub-runs.
    pub jobs: usize,
    /// Directory receiving one per-epoch CSV per sub-run, if any.
    pub run_dir: Option<std::path::PathBuf>,
}

/// Fine-tune once per (value, seed) from the shared base and collect the
/// final-epoch metrics. A failing sub-run stops scheduling new ones; finished
/// points are returned with `failure` set.
pub fn run_sweep(
    exp: &Experiment,
    values: &[SweepValue],
    base_cfg: &TrainConfig,
    opts: &SweepOptions,
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if opts.seeds.len() < 3 {
        return Err(Error::Config(format!("sweeps need at least 3 seeds, got {}", opts.seeds.len())));
    }
    let axis = values[0].axis();
    if values.iter().any(|v| v.axis() != axis) {
        return Err(Error::Config("sweep values span more than one axis".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.sort_key().partial_cmp(&b.sort_key()).expect("finite sweep values"));

    let mut jobs = Vec::new();
    for (vi, v) in sorted.iter().enumerate() {
        for &seed in &opts.seeds {
            let (mut cfg, ctx) = v.apply(base_cfg, exp.ctx_len)?;
            cfg.seed = seed;
            jobs.push((vi, cfg, ctx));
        }
    }
    if let Some(dir) = &opts.run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    // One reference per context length so cached logits are shared.
    let mut refs: BTreeMap<usize, Arc<ReferenceModel<f32>>> = BTreeMap::new();
    for (_, cfg, ctx) in &jobs {
        refs.entry(*ctx).or_insert_with(|| exp.reference(cfg.reference_cache));
    }

    let results: Mutex<Vec<Option<MetricsRecord>>> = Mutex::new(vec![None; jobs.len()]);
    let failure: Mutex<Option<String>> = Mutex::new(None);
    let next = Mutex::new(0usize);
    let worker = || loop {
        let idx = {
            let mut n = next.lock().expect("queue lock");
            if *n >= jobs.len() || failure.lock().expect("failure lock").is_some() {
                return;
            }
            *n += 1;
            *n - 1
        };
        let (vi, cfg, ctx) = &jobs[idx];
        let run = exp.run(cfg, *ctx, Arc::clone(&refs[ctx])).and_then(|out| {
            if let Some(dir) = &opts.run_dir {
                let name = format!("{}_{}_seed{}.csv", axis, sanitize(&sorted[*vi].to_string()), cfg.seed);
                write_metrics_csv(&dir.join(name), &out.records)?;
            }
            Ok(out.records.last().cloned().expect("epoch 0 record"))
        });
        match run {
            Ok(rec) => results.lock().expect("results lock")[idx] = Some(rec),
            Err(e) => {
                let mut f = failure.lock().expect("failure lock");
                f.get_or_insert_with(|| format!("{} = {} seed {}: {e}", axis, sorted[*vi], cfg.seed));
            }
        }
    };
    let threads = opts.jobs.max(1).min(jobs.len());
    if threads == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(worker);
            }
        });
    }

    let results = results.into_inner().expect("results lock");
    let failure = failure.into_inner().expect("failure lock");
    let per_value = opts.seeds.len();
    let mut points = Vec::new();
    for (vi, v) in sorted.iter().enumerate() {
        let runs: Vec<MetricsRecord> = results[vi * per_value..(vi + 1) * per_value].iter().flatten().cloned().collect();
        if runs.len() == per_value {
            points.push(SweepPoint { value: *v, runs });
        }
    }
    Ok(SweepResult { axis, points, failure })
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect()
}

/// One fine-tune per capture site, using feature alignment at that site
/// (SelfAug for `logits`), all from the same base.
pub fn ablate_alignment_position(
    exp: &Experiment,
    sites: &[CaptureSite],
    base_cfg: &TrainConfig,
    opts: &SweepOptions,
) -> Result<SweepResult> {
    let values: Vec<SweepValue> = sites.iter().map(|&s| SweepValue::Position(s)).collect();
    run_sweep(exp, &values, base_cfg, opts)
}

/// Write `summary.json` (pretty, trailing newline).
pub fn write_summary(path: &Path, summary: &SweepSummary) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, summary)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

/// Fixed-width table of a sweep summary.
pub fn render_table(summary: &SweepSummary) -> String {
    let mut s = format!("axis: {}  verdict: {}\nhypothesis: {}\n", summary.axis, summary.verdict, summary.hypothesis);
    s.push_str(&format!(
        "{:<24} {:>5} {:>17} {:>17} {:>19}\n",
        "value", "seeds", "downstream_acc", "retention_acc", "mean_input_kl"
    ));
    for p in &summary.points {
        s.push_str(&format!(
            "{:<24} {:>5} {:>8.3} ± {:<6.3} {:>8.3} ± {:<6.3} {:>10.5} ± {:<6.4}\n",
            p.value,
            p.seeds,
            p.downstream_acc.mean,
            p.downstream_acc.sd,
            p.retention_acc.mean,
            p.retention_acc.sd,
            p.mean_input_kl.mean,
            p.mean_input_kl.sd
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tasks::{gen_general, TaskSpec};

    fn tiny_model() -> TransformerWeights<f32> {
        TransformerWeights::init(&ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 96,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn random_model_is_near_chance() {
        let c = gen_general(&TaskSpec::general(2, 200)).unwrap();
        let acc = eval_accuracy(&tiny_model(), None, &c.probe).unwrap();
        assert!(acc <= 0.05);
        assert_eq!(acc, eval_accuracy(&tiny_model(), None, &c.probe).unwrap());
    }

    #[test]
    fn shift_of_reference_against_itself_is_zero() {
        let w = tiny_model();
        let r = ReferenceModel::new(w.clone(), true);
        let c = gen_rag(&TaskSpec::rag_for_ctx(1, 20, 64), 96).unwrap();
        assert!(measure_shift(&w, None, &r, &c.probe).unwrap().abs() < 1e-8);
    }

    #[test]
    fn empty_probe_is_config_error() {
        assert!(matches!(eval_accuracy(&tiny_model(), None, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn stats_and_inversions() {
        let s = Stat::of(&[1.0, 2.0, 3.0], true);
        assert_eq!((s.mean, s.sd, s.best), (2.0, 1.0, 3.0));
        assert_eq!(Stat::of(&[1.0, 2.0], false).best, 1.0);
        assert_eq!(inversions(&[1.0, 2.0, 1.5, 3.0], |a, b| b >= a), 1);
        assert_eq!(inversions(&[3.0, 2.0, 1.0], |a, b| b >= a), 2);
    }

    #[test]
    fn axis_values_parse_and_apply() {
        for axis in [SweepAxis::Alpha, SweepAxis::Rank, SweepAxis::CtxLen, SweepAxis::Method, SweepAxis::Position] {
            assert_eq!(axis.name().parse::<SweepAxis>().unwrap(), axis);
            for v in axis.default_values() {
                assert_eq!(axis.parse_value(&v.to_string()).unwrap(), v);
                v.apply(&TrainConfig::default(), 64).unwrap();
            }
        }
        assert_eq!(SweepAxis::Position.default_values().len(), 8);
        let (cfg, _) = SweepValue::Rank(32).apply(&TrainConfig::default(), 64).unwrap();
        assert_eq!(cfg.lora.unwrap().multiplier(), TrainConfig::default().lora.unwrap().multiplier());
        assert!(SweepValue::Rank(4).apply(&TrainConfig::sft(), 64).is_err());
    }
}
