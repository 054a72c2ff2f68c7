use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use selfaug::eval::{EvalConfig, SweepAxis, SweepValue};
use selfaug::model::{CaptureSite, ModelConfig};
use selfaug::objectives::Method;
use selfaug::tasks::{TaskKind, TaskSpec};
use selfaug::train::{TrainConfig, PRETRAIN_GATE};

pub const OUT_DIR_ENV: &str = "SELFAUG_OUT_DIR";

/// Everything one experiment needs. Every field has a default, so an empty
/// file is a valid config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Minimum general-probe accuracy for a usable base model.
    pub pretrain_gate: f64,
    pub model: ModelConfig,
    pub tasks: Tasks,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub eval: Eval,
    pub io: Io,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tasks {
    /// Context length of the downstream task outside the context sweep.
    pub ctx_len: usize,
    pub general: TaskSpec,
    pub downstream: TaskSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Eval {
    pub downstream_probe: usize,
    pub retention_probe: usize,
    pub shift_probe: usize,
    pub seeds: Vec<u64>,
    pub sweep: SweepValues,
}

/// Values per sweep axis; an empty list means the axis defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepValues {
    pub alpha: Vec<f64>,
    pub rank: Vec<usize>,
    pub ctx_len: Vec<usize>,
    pub method: Vec<Method>,
    pub position: Vec<CaptureSite>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Io {
    pub out_dir: PathBuf,
    /// Defaults to `base.ckpt` under `out_dir`.
    pub base_checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            pretrain_gate: PRETRAIN_GATE,
            model: ModelConfig::default(),
            tasks: Tasks::default(),
            pretrain: TrainConfig::pretrain(),
            train: TrainConfig::default(),
            eval: Eval::default(),
            io: Io::default(),
        }
    }
}

impl Default for Tasks {
    fn default() -> Self {
        Tasks {
            ctx_len: 64,
            general: TaskSpec::general(0, 3000),
            downstream: TaskSpec {
                distractor_rate: 0.5,
                unanswerable_rate: 0.2,
                ..TaskSpec::rag_for_ctx(7, 500, 64)
            },
        }
    }
}

impl Default for Eval {
    fn default() -> Self {
        let e = EvalConfig::default();
        Eval {
            downstream_probe: e.downstream_probe,
            retention_probe: e.retention_probe,
            shift_probe: e.shift_probe,
            seeds: e.seeds,
            sweep: SweepValues::default(),
        }
    }
}

impl Default for Io {
    fn default() -> Self {
        Io {
            out_dir: PathBuf::from("runs"),
            base_checkpoint: None,
        }
    }
}

impl Eval {
    pub fn core(&self) -> EvalConfig {
        EvalConfig {
            downstream_probe: self.downstream_probe,
            retention_probe: self.retention_probe,
            shift_probe: self.shift_probe,
            seeds: self.seeds.clone(),
        }
    }
}

impl SweepValues {
    pub fn for_axis(&self, axis: SweepAxis) -> Vec<SweepValue> {
        let given: Vec<SweepValue> = match axis {
            SweepAxis::Alpha => self.alpha.iter().map(|&a| SweepValue::Alpha(a)).collect(),
            SweepAxis::Rank => self.rank.iter().map(|&r| SweepValue::Rank(r)).collect(),
            SweepAxis::CtxLen => self.ctx_len.iter().map(|&c| SweepValue::CtxLen(c)).collect(),
            SweepAxis::Method => self.method.iter().map(|&m| SweepValue::Method(m)).collect(),
            SweepAxis::Position => self.position.iter().map(|&s| SweepValue::Position(s)).collect(),
        };
        if given.is_empty() {
            axis.default_values()
        } else {
            given
        }
    }
}

impl ExperimentConfig {
    pub fn base_checkpoint(&self) -> PathBuf {
        self.io.base_checkpoint.clone().unwrap_or_else(|| self.io.out_dir.join("base.ckpt"))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pretrain_gate) {
            bail!("pretrain_gate must lie in [0, 1], got {}", self.pretrain_gate);
        }
        self.model.validate().context("[model]")?;
        if self.tasks.general.kind != TaskKind::GeneralInstruction {
            bail!("[tasks.general] must have kind general_instruction");
        }
        if self.tasks.downstream.kind != TaskKind::RagQa {
            bail!("[tasks.downstream] must have kind rag_qa");
        }
        self.tasks.general.validate(self.model.max_seq_len).context("[tasks.general]")?;
        self.tasks.downstream.validate(self.model.max_seq_len).context("[tasks.downstream]")?;
        if self.tasks.ctx_len == 0 {
            bail!("tasks.ctx_len must be positive");
        }
        if self.pretrain.method != Method::Sft {
            bail!("[pretrain] trains every parameter; its method must be sft");
        }
        self.pretrain.validate().context("[pretrain]")?;
        self.train.validate().context("[train]")?;
        self.eval.core().validate().context("[eval]")?;
        if self.eval.seeds.is_empty() {
            bail!("eval.seeds must name at least one seed");
        }
        Ok(())
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub method: Option<Method>,
    pub alpha: Option<f64>,
    pub rank: Option<usize>,
    pub ctx_len: Option<usize>,
}

/// Read, check and resolve a config file.
///
/// Sections the file leaves out, and keys it leaves out of a section, take
/// that section's defaults: `[pretrain]` starts from the pretraining recipe
/// and `[train]` from the LoRA or SFT recipe its method names.
pub fn load(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
    // A direct parse gives line-anchored messages for syntax errors, unknown
    // keys and mistyped values.
    toml::from_str::<ExperimentConfig>(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    let mut user: Table = text.parse().map_err(|e| anyhow!("{}: {e}", path.display()))?;

    if let Some(m) = overrides.method {
        let train = user.entry("train").or_insert_with(|| Value::Table(Table::new()));
        let train = train.as_table_mut().ok_or_else(|| anyhow!("{}: train must be a table", path.display()))?;
        if m == Method::Sft && train.contains_key("lora") {
            bail!(
                "{}: --method sft fine-tunes every parameter but the config sets [train.lora]; remove that table or pick a LoRA method",
                path.display()
            );
        }
        train.insert("method".into(), Value::String(m.to_string()));
    }

    let train_method = user
        .get("train")
        .and_then(|t| t.get("method"))
        .and_then(Value::as_str)
        .map(str::parse::<Method>)
        .transpose()?;
    let mut defaults = ExperimentConfig::default();
    if train_method == Some(Method::Sft) {
        defaults.train = TrainConfig::sft();
    }
    let mut merged = Table::try_from(&defaults)?;
    overlay(&mut merged, user);
    let mut cfg: ExperimentConfig = merged.try_into().map_err(|e| anyhow!("{}: {e}", path.display()))?;

    if let Some(a) = overrides.alpha {
        if cfg.train.method != Method::LoraSelfAug {
            bail!("--alpha weights the SelfAug term; method {} has none (use --method lora+selfaug)", cfg.train.method);
        }
        cfg.train.alpha = a;
    }
    if let Some(r) = overrides.rank {
        let lora = cfg
            .train
            .lora
            .as_mut()
            .ok_or_else(|| anyhow!("--rank applies to LoRA methods; method {} has no adapters", cfg.train.method))?;
        let multiplier = lora.multiplier();
        lora.rank = r;
        lora.scale = multiplier * r as f64;
    }
    if let Some(c) = overrides.ctx_len {
        cfg.tasks.ctx_len = c;
    }
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            cfg.io.out_dir = PathBuf::from(dir);
        }
    }
    cfg.validate().with_context(|| format!("invalid config {}", path.display()))?;
    Ok(cfg)
}

fn overlay(base: &mut Table, user: Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn empty_file_gives_the_defaults() {
        let (_d, p) = write("");
        let cfg = load(&p, &Overrides::default()).unwrap();
        let mut want = ExperimentConfig::default();
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            want.io.out_dir = dir.into();
        }
        assert_eq!(cfg, want);
    }

    #[test]
    fn shipped_configs_load_and_default_toml_matches_the_defaults() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let default = load(&dir.join("default.toml"), &Overrides::default()).unwrap();
        let mut want = ExperimentConfig::default();
        want.io.out_dir = default.io.out_dir.clone();
        for axis in [SweepAxis::Alpha, SweepAxis::Rank, SweepAxis::CtxLen] {
            assert_eq!(default.eval.sweep.for_axis(axis), axis.default_values());
        }
        want.eval.sweep = default.eval.sweep.clone();
        assert_eq!(default, want);
        load(&dir.join("smoke.toml"), &Overrides::default()).unwrap();
    }

    #[test]
    fn partial_sections_keep_their_own_defaults() {
        let (_d, p) = write("[pretrain]\nepochs = 2\n[train]\nmethod = \"sft\"\n");
        let cfg = load(&p, &Overrides::default()).unwrap();
        assert_eq!(cfg.pretrain, TrainConfig { epochs: 2, ..TrainConfig::pretrain() });
        assert_eq!(cfg.train, TrainConfig::sft());
    }

    #[test]
    fn unknown_keys_are_fatal_and_name_the_line() {
        let (_d, p) = write("[train]\nepochs = 3\nalhpa = 0.5\n");
        let msg = format!("{:#}", load(&p, &Overrides::default()).unwrap_err());
        assert!(msg.contains("line 3") && msg.contains("alhpa"), "{msg}");
    }

    #[test]
    fn conflicting_overrides_are_rejected() {
        let (_d, p) = write("[train.lora]\nrank = 4\n");
        let sft = Overrides { method: Some(Method::Sft), ..Default::default() };
        assert!(format!("{:#}", load(&p, &sft).unwrap_err()).contains("[train.lora]"));
        let (_d, p) = write("");
        let rank_on_sft = Overrides { method: Some(Method::Sft), rank: Some(4), ..Default::default() };
        assert!(format!("{:#}", load(&p, &rank_on_sft).unwrap_err()).contains("--rank"));
        let alpha_on_lora = Overrides { alpha: Some(0.3), ..Default::default() };
        assert!(format!("{:#}", load(&p, &alpha_on_lora).unwrap_err()).contains("--alpha"));
    }

    #[test]
    fn rank_override_keeps_the_multiplier() {
        let (_d, p) = write("");
        let cfg = load(&p, &Overrides { rank: Some(32), ..Default::default() }).unwrap();
        let l = cfg.train.lora.unwrap();
        assert_eq!((l.rank, l.multiplier()), (32, selfaug::lora::LoraConfig::default().multiplier()));
    }
}
