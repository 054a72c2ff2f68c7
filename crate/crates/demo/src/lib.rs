//! Three interactive operations for the browser page: the input-logit KL
//! between two next-token distributions, the warmup-plus-cosine learning-rate
//! curve, and samples from the synthetic tasks. Each has a plain Rust core
//! returning JSON and a thin wasm-bindgen wrapper.

use serde_json::json;
use wasm_bindgen::prelude::*;

use selfaug::autograd::{softmax_rows, Tape, Tensor};
use selfaug::objectives::{kl_input_alignment, KlDirection, SpanMasks};
use selfaug::tasks::{gen_general, gen_rag, TaskSpec, CTX_LENS};
use selfaug::train::{cosine_lr, TrainConfig};

const MAX_LOGITS: usize = 64;
const MAX_STEPS: usize = 100_000;

fn parse_logits(text: &str, what: &str) -> Result<Vec<f64>, String> {
    let xs = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("{what}: '{s}' is not a number")))
        .collect::<Result<Vec<f64>, String>>()?;
    if xs.is_empty() || xs.len() > MAX_LOGITS {
        return Err(format!("{what}: give between 1 and {MAX_LOGITS} logits"));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(format!("{what}: logits must be finite"));
    }
    Ok(xs)
}

fn kl(student: &[f64], reference: &[f64], direction: KlDirection) -> Result<f64, String> {
    let n = student.len();
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::new(&[1, n], student.to_vec()).map_err(|e| e.to_string())?);
    let r = Tensor::new(&[1, n], reference.to_vec()).map_err(|e| e.to_string())?;
    let masks = SpanMasks {
        input: vec![true],
        response: vec![false],
        pad: vec![false],
    };
    let k = kl_input_alignment(&mut tape, s, &r, &masks, direction).map_err(|e| e.to_string())?;
    Ok(tape.value(k).item())
}

fn probs(xs: &[f64]) -> Result<Vec<f64>, String> {
    let t = Tensor::new(&[1, xs.len()], xs.to_vec()).map_err(|e| e.to_string())?;
    Ok(softmax_rows(&t).map_err(|e| e.to_string())?.data().to_vec())
}

/// Both distributions and the KL between them, with `alpha` times the
/// forward KL as the added training penalty.
pub fn kl_report(student: &str, reference: &str, alpha: f64) -> Result<String, String> {
    let s = parse_logits(student, "fine-tuned logits")?;
    let r = parse_logits(reference, "reference logits")?;
    if s.len() != r.len() {
        return Err(format!("need the same number of logits, got {} and {}", s.len(), r.len()));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err("alpha must be a non-negative number".into());
    }
    let forward = kl(&s, &r, KlDirection::Forward)?;
    let reverse = kl(&s, &r, KlDirection::Reverse)?;
    Ok(json!({
        "student_probs": probs(&s)?,
        "reference_probs": probs(&r)?,
        "kl_forward": forward,
        "kl_reverse": reverse,
        "penalty": alpha * forward,
    })
    .to_string())
}

/// Learning rate at every update step 1..=total_steps.
pub fn lr_curve(total_steps: usize, peak_lr: f64, min_lr: f64, warmup_ratio: f64) -> Result<Vec<f64>, String> {
    if total_steps == 0 || total_steps > MAX_STEPS {
        return Err(format!("steps must lie in 1..={MAX_STEPS}"));
    }
    let cfg = TrainConfig {
        peak_lr,
        min_lr,
        warmup_ratio,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok((1..=total_steps).map(|s| cosine_lr(s, total_steps, &cfg)).collect())
}

/// A few training examples from one synthetic task, as JSON.
pub fn task_samples(kind: &str, seed: u64, ctx_len: usize, count: usize) -> Result<String, String> {
    let count = count.clamp(1, 20);
    let corpus = match kind {
        "general" => gen_general(&TaskSpec::general(seed, 40)),
        "rag_qa" => {
            if !CTX_LENS.contains(&ctx_len) {
                return Err(format!("context length must be one of {CTX_LENS:?}"));
            }
            let spec = TaskSpec {
                distractor_rate: 0.5,
                unanswerable_rate: 0.2,
                ..TaskSpec::rag_for_ctx(seed, 40, ctx_len)
            };
            gen_rag(&spec, 512)
        }
        _ => return Err(format!("unknown task '{kind}' (general or rag_qa)")),
    }
    .map_err(|e| e.to_string())?;
    let rows: Vec<_> = corpus
        .train
        .iter()
        .take(count)
        .map(|ex| json!({ "family": ex.meta.task, "input": ex.input, "response": ex.response }))
        .collect();
    Ok(json!(rows).to_string())
}

#[wasm_bindgen(js_name = klReport)]
pub fn kl_report_js(student: &str, reference: &str, alpha: f64) -> Result<String, JsError> {
    kl_report(student, reference, alpha).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = lrCurve)]
pub fn lr_curve_js(total_steps: usize, peak_lr: f64, min_lr: f64, warmup_ratio: f64) -> Result<Vec<f64>, JsError> {
    lr_curve(total_steps, peak_lr, min_lr, warmup_ratio).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = taskSamples)]
pub fn task_samples_js(kind: &str, seed: u64, ctx_len: usize, count: usize) -> Result<String, JsError> {
    task_samples(kind, seed, ctx_len, count).map_err(|e| JsError::new(&e))
}
