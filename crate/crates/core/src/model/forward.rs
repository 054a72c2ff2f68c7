use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, TransformerWeights};
use crate::autograd::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::lora::{lora_linear, BoundLora, LoraAdapters, LoraSite};

thread_local! {
    static FORWARD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of forward passes started on this thread.
pub fn forward_calls() -> u64 {
    FORWARD_CALLS.with(Cell::get)
}

/// Where intermediate features are read for the alignment ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureSite {
    /// Output of the query projection.
    AttnQ,
    AttnK,
    AttnV,
    /// Output of the attention output projection.
    AttnO,
    /// Q, K, V and O outputs together.
    AttnAll,
    /// Feed-forward block output.
    Ffn,
    /// Residual stream after every block.
    AllLayers,
    /// Final per-position vocabulary logits.
    Logits,
}

impl CaptureSite {
    pub const ALL: [CaptureSite; 8] = [
        CaptureSite::AttnQ,
        CaptureSite::AttnK,
        CaptureSite::AttnV,
        CaptureSite::AttnO,
        CaptureSite::AttnAll,
        CaptureSite::Ffn,
        CaptureSite::AllLayers,
        CaptureSite::Logits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CaptureSite::AttnQ => "attn_q",
            CaptureSite::AttnK => "attn_k",
            CaptureSite::AttnV => "attn_v",
            CaptureSite::AttnO => "attn_o",
            CaptureSite::AttnAll => "attn_all",
            CaptureSite::Ffn => "ffn",
            CaptureSite::AllLayers => "all_layers",
            CaptureSite::Logits => "logits",
        }
    }
}

impl fmt::Display for CaptureSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CaptureSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CaptureSite::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown capture site '{s}'")))
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `[n × |V|]`
    pub logits: Var,
    /// Captured tensors as (layer, var), layer-major.
    pub features: Vec<(usize, Var)>,
}

/// Captured feature values grouped by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCapture<T> {
    pub site: CaptureSite,
    pub layers: Vec<Vec<Tensor<T>>>,
}

/// `h = z·Wᵀ + b` for `z[n×d]`, `W[|V|×d]`, `b[|V|]`.
pub fn project_logits<T: Real>(tape: &mut Tape<T>, z: Var, w: Var, b: Var) -> Result<Var> {
    let zw = tape.matmul_bt(z, w)?;
    tape.add_row(zw, b)
}

fn check_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Degenerate("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::Length {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Vocab {
            token: bad,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

/// Teacher-forced pass over the whole sequence, recorded on `tape`.
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    params: &ModelParams<Var>,
    lora: Option<&BoundLora>,
    tokens: &[usize],
    capture: Option<CaptureSite>,
) -> Result<ForwardOutput> {
    check_tokens(config, tokens)?;
    FORWARD_CALLS.with(|c| c.set(c.get() + 1));

    let n = tokens.len();
    let positions: Vec<usize> = (0..n).collect();
    let tok = tape.gather_rows(params.tok_emb, tokens)?;
    let pos = tape.gather_rows(params.pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mut features = Vec::new();

    for (li, layer) in params.layers.iter().enumerate() {
        let adapter = |site| lora.and_then(|l| l.get(li, site));
        let mult = lora.map_or(0.0, |l| l.multiplier);

        let h = tape.layernorm(x, layer.ln1_gain, layer.ln1_bias)?;
        let q = lora_linear(tape, h, layer.wq, adapter(LoraSite::AttnQ), mult)?;
        let k = lora_linear(tape, h, layer.wk, adapter(LoraSite::AttnK), mult)?;
        let v = lora_linear(tape, h, layer.wv, adapter(LoraSite::AttnV), mult)?;
        let a = tape.causal_attention(q, k, v, config.n_heads)?;
        let o = lora_linear(tape, a, layer.wo, adapter(LoraSite::AttnO), mult)?;
        x = tape.add(x, o)?;

        let h2 = tape.layernorm(x, layer.ln2_gain, layer.ln2_bias)?;
        let up = lora_linear(tape, h2, layer.ffn_in, adapter(LoraSite::FfnIn), mult)?;
        let act = tape.gelu(up);
        let f = lora_linear(tape, act, layer.ffn_out, adapter(LoraSite::FfnOut), mult)?;
        x = tape.add(x, f)?;

        match capture {
            Some(CaptureSite::AttnQ) => features.push((li, q)),
            Some(CaptureSite::AttnK) => features.push((li, k)),
            Some(CaptureSite::AttnV) => features.push((li, v)),
            Some(CaptureSite::AttnO) => features.push((li, o)),
            Some(CaptureSite::AttnAll) => features.extend([(li, q), (li, k), (li, v), (li, o)]),
            Some(CaptureSite::Ffn) => features.push((li, f)),
            Some(CaptureSite::AllLayers) => features.push((li, x)),
            Some(CaptureSite::Logits) | None => {}
        }
    }

    let z = tape.layernorm(x, params.ln_f_gain, params.ln_f_bias)?;
    let w = params.out_proj.unwrap_or(params.tok_emb);
    let logits = project_logits(tape, z, w, params.out_bias)?;
    if capture == Some(CaptureSite::Logits) {
        features.push((params.layers.len().saturating_sub(1), logits));
    }
    Ok(ForwardOutput { logits, features })
}

/// Gradient-free forward returning plain tensors.
pub fn forward<T: Real>(
    weights: &TransformerWeights<T>,
    lora: Option<&LoraAdapters<T>>,
    tokens: &[usize],
    capture: Option<CaptureSite>,
) -> Result<(Tensor<T>, Option<FeatureCapture<T>>)> {
    let mut tape = Tape::new();
    let params = weights.bind(&mut tape, false);
    let bound = lora.map(|l| l.bind(&mut tape, false));
    let out = forward_on_tape(&mut tape, &weights.config, &params, bound.as_ref(), tokens, capture)?;
    let features = capture.map(|site| {
        let mut layers: Vec<Vec<Tensor<T>>> = Vec::new();
        for &(li, v) in &out.features {
            if layers.len() <= li {
                layers.resize_with(li + 1, Vec::new);
            }
            layers[li].push(tape.value(v).clone());
        }
        layers.retain(|l| !l.is_empty());
        FeatureCapture { site, layers }
    });
    Ok((tape.value(out.logits).clone(), features))
}

/// Index of the maximum, lowest index on ties.
pub fn argmax_lowest<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Append argmax tokens until `stop` is produced, `max_new` tokens have been
/// added, or the sequence reaches `max_seq_len`. Returns prompt + generation.
pub fn greedy_decode<T: Real>(
    weights: &TransformerWeights<T>,
    lora: Option<&LoraAdapters<T>>,
    prompt: &[usize],
    max_new: usize,
    stop: Option<usize>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Degenerate("greedy_decode needs a non-empty prompt".into()));
    }
    check_tokens(&weights.config, prompt)?;
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        if seq.len() >= weights.config.max_seq_len {
            break;
        }
        let (logits, _) = forward(weights, lora, &seq, None)?;
        let next = argmax_lowest(logits.row(logits.rows() - 1));
        seq.push(next);
        if Some(next) == stop {
            break;
        }
    }
    Ok(seq)
}
