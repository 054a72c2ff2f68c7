use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use selfaug::eval::{render_table, run_sweep, write_metrics_csv, Experiment, SweepAxis, SweepOptions, SweepResult};
use selfaug::model::{checksum, encode_with, load_checkpoint, TransformerWeights};
use selfaug::tasks::gen_general;
use selfaug::train::pretrain;

use crate::config::ExperimentConfig;

/// How a command ended when it did not fail outright.
#[derive(Debug, PartialEq, Eq)]
pub enum Status {
    Done,
    /// The pretraining gate failed or a sweep stopped early; outputs exist.
    Incomplete(String),
}

fn refuse_overwrite(paths: &[&Path], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    if let Some(p) = paths.iter().find(|p| p.exists()) {
        bail!("{} already exists; pass --force to overwrite", p.display());
    }
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn config_meta(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    Ok(serde_json::json!({ "config": serde_json::to_value(cfg)? }))
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, force: bool) -> Result<Status> {
    let ckpt = cfg.base_checkpoint();
    let curve_path = cfg.io.out_dir.join("pretrain_curve.csv");
    refuse_overwrite(&[&ckpt, &curve_path], force)?;

    let general = gen_general(&cfg.tasks.general)?;
    let probe = &general.probe[..cfg.eval.retention_probe.min(general.probe.len())];
    eprintln!(
        "pretraining on {} general examples for {} epochs",
        general.train.len(),
        cfg.pretrain.epochs
    );
    let mut out = pretrain(&cfg.model, &general.train, probe, &cfg.pretrain)?;
    out.gate = cfg.pretrain_gate;

    write_file(&ckpt, &encode_with(&out.weights, None, Some(config_meta(cfg)?), &[]))?;
    create_parent(&curve_path)?;
    let mut w = csv::Writer::from_path(&curve_path).with_context(|| format!("cannot write {}", curve_path.display()))?;
    for p in &out.curve {
        w.serialize(p)?;
    }
    w.flush()?;

    print!("{}", out.report());
    println!("base checkpoint {} (sha256 {})", ckpt.display(), checksum(&out.weights, None));
    if out.passed() {
        Ok(Status::Done)
    } else {
        Ok(Status::Incomplete(format!(
            "general probe accuracy {:.3} is below the gate {:.2}",
            out.probe_acc, out.gate
        )))
    }
}

fn load_base(cfg: &ExperimentConfig) -> Result<TransformerWeights<f32>> {
    let path = cfg.base_checkpoint();
    if !path.exists() {
        bail!("base checkpoint {} not found; run `selfaug pretrain` first", path.display());
    }
    let ckpt = load_checkpoint::<f32>(&path).with_context(|| format!("cannot load {}", path.display()))?;
    if ckpt.lora.is_some() {
        bail!("{} holds adapters; the base must be a plain model", path.display());
    }
    if ckpt.weights.config != cfg.model {
        bail!("{} was trained with a different [model] section", path.display());
    }
    Ok(ckpt.weights)
}

fn experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    Ok(Experiment {
        base: load_base(cfg)?,
        general: gen_general(&cfg.tasks.general)?,
        downstream: cfg.tasks.downstream.clone(),
        ctx_len: cfg.tasks.ctx_len,
        eval: cfg.eval.core(),
    })
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect()
}

/// Output stem of one fine-tune, e.g. `lora_selfaug_a0.5_r8_c64_s0`.
pub fn run_tag(cfg: &ExperimentConfig) -> String {
    let t = &cfg.train;
    let rank = t.lora.as_ref().map_or("full".to_string(), |l| format!("r{}", l.rank));
    file_safe(&format!("{}_a{}_{rank}_c{}_s{}", t.method, t.alpha, cfg.tasks.ctx_len, t.seed))
}

pub fn cmd_finetune(cfg: &ExperimentConfig, force: bool) -> Result<Status> {
    let dir = cfg.io.out_dir.join("finetune");
    let tag = run_tag(cfg);
    let ckpt = dir.join(format!("{tag}.ckpt"));
    let csv_path = dir.join(format!("{tag}.csv"));
    refuse_overwrite(&[&ckpt, &csv_path], force)?;

    let exp = experiment(cfg)?;
    eprintln!("fine-tuning {tag}");
    let out = exp.run(&cfg.train, cfg.tasks.ctx_len, exp.reference(cfg.train.reference_cache))?;
    write_file(&ckpt, &encode_with(&out.weights, out.lora.as_ref(), Some(config_meta(cfg)?), &[]))?;
    write_metrics_csv(&csv_path, &out.records)?;

    for r in &out.records {
        println!(
            "epoch {:>3}  downstream {:.3}  retention {:.3}  input kl {:.5}",
            r.epoch, r.downstream_acc, r.retention_acc, r.mean_input_kl
        );
    }
    println!("wrote {} and {}", ckpt.display(), csv_path.display());
    Ok(Status::Done)
}

fn sweep_outputs(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join("sweep.csv"), dir.join("summary.json"), dir.join("table.txt"))
}

fn summary_bytes(result: &SweepResult) -> Result<(Vec<u8>, String)> {
    let summary = result.summary();
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    Ok((json, render_table(&summary)))
}

pub fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis, jobs: usize, force: bool) -> Result<Status> {
    let dir = cfg.io.out_dir.join(format!("sweep_{axis}"));
    let (csv_path, json_path, table_path) = sweep_outputs(&dir);
    refuse_overwrite(&[&csv_path, &json_path, &table_path], force)?;

    let exp = experiment(cfg)?;
    let values = cfg.eval.sweep.for_axis(axis);
    eprintln!("{axis} sweep over {} values x {} seeds, {jobs} at a time", values.len(), cfg.eval.seeds.len());
    let opts = SweepOptions {
        seeds: cfg.eval.seeds.clone(),
        jobs,
        run_dir: Some(dir.join("runs")),
    };
    let result = run_sweep(&exp, &values, &cfg.train, &opts)?;
    result.write_csv(&csv_path)?;
    let (json, table) = summary_bytes(&result)?;
    write_file(&json_path, &json)?;
    write_file(&table_path, table.as_bytes())?;
    print!("{table}");

    match &result.failure {
        None => Ok(Status::Done),
        Some(why) => {
            let done: Vec<String> = result.points.iter().map(|p| p.value.to_string()).collect();
            Ok(Status::Incomplete(format!(
                "sweep stopped at {why}; completed points: [{}] of {}",
                done.join(", "),
                values.len()
            )))
        }
    }
}

/// Rebuild `summary.json` and `table.txt` from `sweep.csv`. Rewriting
/// identical content is allowed; changing existing files needs `--force`.
pub fn cmd_report(dir: &Path, force: bool) -> Result<Status> {
    let (csv_path, json_path, table_path) = sweep_outputs(dir);
    if !csv_path.exists() {
        bail!("no sweep.csv in {}", dir.display());
    }
    let result = selfaug::eval::read_sweep_csv(&csv_path)?;
    let (json, table) = summary_bytes(&result)?;
    for (path, bytes) in [(&json_path, json.as_slice()), (&table_path, table.as_bytes())] {
        match std::fs::read(path) {
            Ok(old) if old == bytes => {}
            Ok(_) if !force => bail!("{} differs from a fresh report; pass --force to overwrite", path.display()),
            _ => write_file(path, bytes)?,
        }
    }
    print!("{table}");
    Ok(Status::Done)
}
