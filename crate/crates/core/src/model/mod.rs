//! Small decoder-only transformer: learned absolute positions, pre-layernorm
//! blocks, GELU feed-forward, untied output projection with bias.

mod checkpoint;
mod forward;

use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub use checkpoint::{checksum, decode, encode, encode_with, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    argmax_lowest, forward, forward_calls, forward_on_tape, greedy_decode, project_logits, CaptureSite,
    FeatureCapture, ForwardOutput,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Reuse the token embedding as the output projection.
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::tasks::VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 512,
            seed: 0,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.n_heads ({}) must divide model.d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let per_layer = 4 * d + 4 * d * d + 2 * d * f;
        let out = if self.tie_embeddings { 0 } else { v * d };
        v * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d + out + v
    }
}

/// Per-block parameters. Matrices are stored `[out × in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<S> {
    pub ln1_gain: S,
    pub ln1_bias: S,
    pub wq: S,
    pub wk: S,
    pub wv: S,
    pub wo: S,
    pub ln2_gain: S,
    pub ln2_bias: S,
    /// `[d_ff × d]`
    pub ffn_in: S,
    /// `[d × d_ff]`
    pub ffn_out: S,
}

/// Parameter tree, generic over the slot type so the same layout holds
/// tensors at rest and tape handles during a pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub tok_emb: S,
    pub pos_emb: S,
    pub layers: Vec<LayerParams<S>>,
    pub ln_f_gain: S,
    pub ln_f_bias: S,
    /// `W` in `h = z·Wᵀ + b`, `[|V| × d]`. `None` when tied to `tok_emb`.
    pub out_proj: Option<S>,
    pub out_bias: S,
}

impl<S> ModelParams<S> {
    /// Parameters in canonical order with stable names.
    pub fn named(&self) -> Vec<(String, &S)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, s) in [
                ("ln1.gain", &l.ln1_gain),
                ("ln1.bias", &l.ln1_bias),
                ("attn.wq", &l.wq),
                ("attn.wk", &l.wk),
                ("attn.wv", &l.wv),
                ("attn.wo", &l.wo),
                ("ln2.gain", &l.ln2_gain),
                ("ln2.bias", &l.ln2_bias),
                ("ffn.in", &l.ffn_in),
                ("ffn.out", &l.ffn_out),
            ] {
                out.push((format!("layers.{i}.{n}"), s));
            }
        }
        out.push(("ln_f.gain".to_string(), &self.ln_f_gain));
        out.push(("ln_f.bias".to_string(), &self.ln_f_bias));
        if let Some(w) = &self.out_proj {
            out.push(("out_proj.weight".to_string(), w));
        }
        out.push(("out_proj.bias".to_string(), &self.out_bias));
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut S> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.ffn_in,
                &mut l.ffn_out,
            ]);
        }
        out.push(&mut self.ln_f_gain);
        out.push(&mut self.ln_f_bias);
        if let Some(w) = &mut self.out_proj {
            out.push(w);
        }
        out.push(&mut self.out_bias);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&S) -> U) -> ModelParams<U> {
        ModelParams {
            tok_emb: f(&self.tok_emb),
            pos_emb: f(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: f(&l.ln1_gain),
                    ln1_bias: f(&l.ln1_bias),
                    wq: f(&l.wq),
                    wk: f(&l.wk),
                    wv: f(&l.wv),
                    wo: f(&l.wo),
                    ln2_gain: f(&l.ln2_gain),
                    ln2_bias: f(&l.ln2_bias),
                    ffn_in: f(&l.ffn_in),
                    ffn_out: f(&l.ffn_out),
                })
                .collect(),
            ln_f_gain: f(&self.ln_f_gain),
            ln_f_bias: f(&self.ln_f_bias),
            out_proj: self.out_proj.as_ref().map(&mut f),
            out_bias: f(&self.out_bias),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWeights<T> {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<T>>,
}

impl<T: Real> TransformerWeights<T> {
    /// GPT-2 style init: N(0, 0.02) matrices, residual projections scaled by
    /// 1/sqrt(2L), unit layernorm gains, zero biases.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(config.seed, Stream::ModelInit);
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let std = 0.02;
        let resid_std = std / ((2 * config.n_layers) as f64).sqrt();
        let tok_emb = rng::normal_tensor(&mut r, &[v, d], std);
        let pos_emb = rng::normal_tensor(&mut r, &[config.max_seq_len, d], std);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::full(&[d], T::one()),
                ln1_bias: Tensor::zeros(&[d]),
                wq: rng::normal_tensor(&mut r, &[d, d], std),
                wk: rng::normal_tensor(&mut r, &[d, d], std),
                wv: rng::normal_tensor(&mut r, &[d, d], std),
                wo: rng::normal_tensor(&mut r, &[d, d], resid_std),
                ln2_gain: Tensor::full(&[d], T::one()),
                ln2_bias: Tensor::zeros(&[d]),
                ffn_in: rng::normal_tensor(&mut r, &[f, d], std),
                ffn_out: rng::normal_tensor(&mut r, &[d, f], resid_std),
            })
            .collect();
        let out_proj = (!config.tie_embeddings).then(|| rng::normal_tensor(&mut r, &[v, d], std));
        Ok(Self {
            config: config.clone(),
            params: ModelParams {
                tok_emb,
                pos_emb,
                layers,
                ln_f_gain: Tensor::full(&[d], T::one()),
                ln_f_bias: Tensor::zeros(&[d]),
                out_proj,
                out_bias: Tensor::zeros(&[v]),
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Put every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ModelParams<Var> {
        self.params.map(|t| tape.leaf(t.clone(), trainable))
    }

    pub fn cast<U: Real>(&self) -> TransformerWeights<U> {
        TransformerWeights {
            config: self.config.clone(),
            params: self.params.map(|t| t.cast()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.named().iter().all(|(_, t)| t.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_is_a_function_of_config() {
        for tie in [false, true] {
            let cfg = ModelConfig {
                tie_embeddings: tie,
                ..ModelConfig::default()
            };
            let w = TransformerWeights::<f32>::init(&cfg).unwrap();
            assert_eq!(w.param_count(), cfg.param_count());
            assert!(w.all_finite());
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        let a = TransformerWeights::<f32>::init(&cfg).unwrap();
        let b = TransformerWeights::<f32>::init(&cfg).unwrap();
        assert_eq!(a, b);
        let c = TransformerWeights::<f32>::init(&ModelConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }
}
