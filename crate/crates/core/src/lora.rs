//! Low-rank adapters on the block matrices.
//!
//! An adapter on a base matrix `W0[out×in]` holds `A[r×in]` and `B[out×r]`
//! and contributes `(scale/r)·B·A`. `B` starts at zero, so a fresh adapter
//! leaves the model's function unchanged.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, TransformerWeights};
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraSite {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    FfnIn,
    FfnOut,
}

impl LoraSite {
    pub const ALL: [LoraSite; 6] = [
        LoraSite::AttnQ,
        LoraSite::AttnK,
        LoraSite::AttnV,
        LoraSite::AttnO,
        LoraSite::FfnIn,
        LoraSite::FfnOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LoraSite::AttnQ => "attn_q",
            LoraSite::AttnK => "attn_k",
            LoraSite::AttnV => "attn_v",
            LoraSite::AttnO => "attn_o",
            LoraSite::FfnIn => "ffn_in",
            LoraSite::FfnOut => "ffn_out",
        }
    }

    /// `(in, out)` extents of the base matrix.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        match self {
            LoraSite::FfnIn => (d, f),
            LoraSite::FfnOut => (f, d),
            _ => (d, d),
        }
    }

    pub fn base<S>(self, params: &ModelParams<S>, layer: usize) -> &S {
        let l = &params.layers[layer];
        match self {
            LoraSite::AttnQ => &l.wq,
            LoraSite::AttnK => &l.wk,
            LoraSite::AttnV => &l.wv,
            LoraSite::AttnO => &l.wo,
            LoraSite::FfnIn => &l.ffn_in,
            LoraSite::FfnOut => &l.ffn_out,
        }
    }

    fn base_mut<S>(self, params: &mut ModelParams<S>, layer: usize) -> &mut S {
        let l = &mut params.layers[layer];
        match self {
            LoraSite::AttnQ => &mut l.wq,
            LoraSite::AttnK => &mut l.wk,
            LoraSite::AttnV => &mut l.wv,
            LoraSite::AttnO => &mut l.wo,
            LoraSite::FfnIn => &mut l.ffn_in,
            LoraSite::FfnOut => &mut l.ffn_out,
        }
    }
}

impl fmt::Display for LoraSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LoraSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LoraSite::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown LoRA target site '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Adapter output is multiplied by `scale / rank`.
    pub scale: f64,
    pub target_sites: Vec<LoraSite>,
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            scale: 16.0,
            target_sites: LoraSite::ALL.to_vec(),
            init_std: 0.02,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora.rank must be >= 1".into()));
        }
        if self.target_sites.is_empty() {
            return Err(Error::Config("lora.target_sites must be non-empty".into()));
        }
        if !self.scale.is_finite() || !self.init_std.is_finite() || self.init_std < 0.0 {
            return Err(Error::Config("lora.scale and lora.init_std must be finite".into()));
        }
        Ok(())
    }

    pub fn multiplier(&self) -> f64 {
        self.scale / self.rank as f64
    }

    /// Sites in canonical order without duplicates.
    pub fn sites(&self) -> Vec<LoraSite> {
        let mut s = self.target_sites.clone();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Σ over adapted matrices of r·(in + out).
    pub fn trainable_params(&self, model: &ModelConfig) -> usize {
        let per_layer: usize = self
            .sites()
            .iter()
            .map(|s| {
                let (i, o) = s.dims(model);
                self.rank * (i + o)
            })
            .sum();
        per_layer * model.n_layers
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterPair<S> {
    /// `[r × in]`
    pub a: S,
    /// `[out × r]`
    pub b: S,
}

/// All adapters of a model, ordered by (layer, site).
#[derive(Clone, Debug, PartialEq)]
pub struct LoraParams<S> {
    pub entries: Vec<(usize, LoraSite, AdapterPair<S>)>,
}

impl<S> LoraParams<S> {
    pub fn get(&self, layer: usize, site: LoraSite) -> Option<&AdapterPair<S>> {
        self.entries
            .iter()
            .find(|(l, s, _)| *l == layer && *s == site)
            .map(|(_, _, p)| p)
    }

    pub fn named(&self) -> Vec<(String, &S)> {
        let mut out = Vec::with_capacity(self.entries.len() * 2);
        for (l, s, p) in &self.entries {
            out.push((format!("layers.{l}.{s}.a"), &p.a));
            out.push((format!("layers.{l}.{s}.b"), &p.b));
        }
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut S> {
        self.entries
            .iter_mut()
            .flat_map(|(_, _, p)| [&mut p.a, &mut p.b])
            .collect()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&S) -> U) -> LoraParams<U> {
        LoraParams {
            entries: self
                .entries
                .iter()
                .map(|(l, s, p)| {
                    (
                        *l,
                        *s,
                        AdapterPair {
                            a: f(&p.a),
                            b: f(&p.b),
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapters<T> {
    pub config: LoraConfig,
    pub params: LoraParams<Tensor<T>>,
}

/// Adapters placed on a tape.
#[derive(Debug)]
pub struct BoundLora {
    pub multiplier: f64,
    pub params: LoraParams<Var>,
}

impl BoundLora {
    pub fn get(&self, layer: usize, site: LoraSite) -> Option<&AdapterPair<Var>> {
        self.params.get(layer, site)
    }
}

impl<T: Real> LoraAdapters<T> {
    /// `A ~ N(0, init_std)`, `B = 0`.
    pub fn init(config: &LoraConfig, model: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(seed, Stream::AdapterInit);
        let mut entries = Vec::new();
        for layer in 0..model.n_layers {
            for site in config.sites() {
                let (i, o) = site.dims(model);
                let a = rng::normal_tensor(&mut r, &[config.rank, i], config.init_std);
                let b = Tensor::zeros(&[o, config.rank]);
                entries.push((layer, site, AdapterPair { a, b }));
            }
        }
        Ok(Self {
            config: config.clone(),
            params: LoraParams { entries },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundLora {
        BoundLora {
            multiplier: self.config.multiplier(),
            params: self.params.map(|t| tape.leaf(t.clone(), trainable)),
        }
    }

    pub fn cast<U: Real>(&self) -> LoraAdapters<U> {
        LoraAdapters {
            config: self.config.clone(),
            params: self.params.map(|t| t.cast()),
        }
    }
}

/// `x·W0ᵀ + m·(x·Aᵀ)·Bᵀ`, or just the base projection without an adapter.
pub fn lora_linear<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w0: Var,
    adapter: Option<&AdapterPair<Var>>,
    multiplier: f64,
) -> Result<Var> {
    let base = tape.matmul_bt(x, w0)?;
    let Some(p) = adapter else {
        return Ok(base);
    };
    let xa = tape.matmul_bt(x, p.a)?;
    let xab = tape.matmul_bt(xa, p.b)?;
    let delta = tape.scale(xab, multiplier);
    tape.add(base, delta)
}

/// `ΔW = m·B·A`.
pub fn delta_weight<T: Real>(pair: &AdapterPair<Tensor<T>>, multiplier: f64) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let b = tape.constant(pair.b.clone());
    let a = tape.constant(pair.a.clone());
    let ba = tape.matmul(b, a)?;
    let d = tape.scale(ba, multiplier);
    Ok(tape.value(d).clone())
}

/// `W0 + m·B·A`.
pub fn merge<T: Real>(w0: &Tensor<T>, pair: &AdapterPair<Tensor<T>>, multiplier: f64) -> Result<Tensor<T>> {
    let delta = delta_weight(pair, multiplier)?;
    if delta.shape() != w0.shape() {
        return Err(Error::shape("lora merge", w0.shape(), delta.shape()));
    }
    let data = w0.data().iter().zip(delta.data()).map(|(&w, &d)| w + d).collect();
    Tensor::new(w0.shape(), data)
}

/// Fold every adapter into a copy of the base weights.
pub fn merge_all<T: Real>(base: &TransformerWeights<T>, adapters: &LoraAdapters<T>) -> Result<TransformerWeights<T>> {
    let mut merged = base.clone();
    let m = adapters.config.multiplier();
    for (layer, site, pair) in &adapters.params.entries {
        let slot = site.base_mut(&mut merged.params, *layer);
        *slot = merge(slot, pair, m)?;
    }
    Ok(merged)
}

/// `‖W0ᵀ·ΔW‖_F²` for one adapted matrix, differentiable in A and B.
pub fn orthogonal_penalty_one<T: Real>(
    tape: &mut Tape<T>,
    w0: Var,
    pair: &AdapterPair<Var>,
    multiplier: f64,
) -> Result<Var> {
    // W0ᵀ(BA) = (W0ᵀB)A keeps the intermediate at [in × r].
    let w0t = tape.transpose(w0)?;
    let w0t_b = tape.matmul(w0t, pair.b)?;
    let prod = tape.matmul(w0t_b, pair.a)?;
    let scaled = tape.scale(prod, multiplier);
    let sq = tape.mul(scaled, scaled)?;
    Ok(tape.sum_all(sq))
}

/// Orthogonality penalty summed over every adapted matrix.
pub fn orthogonal_penalty<T: Real>(tape: &mut Tape<T>, base: &ModelParams<Var>, lora: &BoundLora) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (layer, site, pair) in &lora.params.entries {
        let w0 = *site.base(base, *layer);
        let p = orthogonal_penalty_one(tape, w0, pair, lora.multiplier)?;
        total = Some(match total {
            Some(t) => tape.add(t, p)?,
            None => p,
        });
    }
    total.ok_or_else(|| Error::Config("orthogonal penalty needs at least one adapter".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(a: &[&[f64]], b: &[&[f64]]) -> AdapterPair<Tensor<f64>> {
        AdapterPair {
            a: Tensor::from_rows(a).unwrap(),
            b: Tensor::from_rows(b).unwrap(),
        }
    }

    #[test]
    fn merge_hand_case() {
        let w0 = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let p = pair(&[&[1.0, 1.0]], &[&[1.0], &[0.0]]);
        let merged = merge(&w0, &p, 1.0).unwrap();
        assert_eq!(merged.data(), &[2.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn merge_with_zero_b_is_identity() {
        let w0 = Tensor::<f32>::from_f64(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap();
        let p = AdapterPair {
            a: Tensor::<f32>::from_f64(&[1, 3], &[0.7, 0.8, 0.9]).unwrap(),
            b: Tensor::zeros(&[2, 1]),
        };
        assert!(merge(&w0, &p, 2.0).unwrap().bitwise_eq(&w0));
    }

    fn penalty(w0: &[&[f64]], a: &[&[f64]], b: &[&[f64]]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(Tensor::from_rows(w0).unwrap());
        let p = AdapterPair {
            a: tape.param(Tensor::from_rows(a).unwrap()),
            b: tape.param(Tensor::from_rows(b).unwrap()),
        };
        let v = orthogonal_penalty_one(&mut tape, w, &p, 1.0).unwrap();
        tape.value(v).item()
    }

    #[test]
    fn orthogonal_penalty_cases() {
        // ΔW = B·A = [[0,0],[0,1]]
        let disjoint = penalty(&[&[1.0, 0.0], &[0.0, 0.0]], &[&[0.0, 1.0]], &[&[0.0], &[1.0]]);
        assert_eq!(disjoint, 0.0);
        // ΔW = I2 via rank 2
        let ident = penalty(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!((ident - 2.0).abs() < 1e-12);
        let zero_b = penalty(&[&[1.0, 2.0], &[3.0, 4.0]], &[&[1.0, 1.0]], &[&[0.0], &[0.0]]);
        assert_eq!(zero_b, 0.0);
    }

    #[test]
    fn trainable_count_formula() {
        let model = ModelConfig::default();
        let cfg = LoraConfig::default();
        let ad = LoraAdapters::<f32>::init(&cfg, &model, 0).unwrap();
        assert_eq!(ad.param_count(), cfg.trainable_params(&model));
        assert!(ad.param_count() < model.param_count());
    }

    #[test]
    fn config_validation() {
        assert!(LoraConfig { rank: 0, ..Default::default() }.validate().is_err());
        assert!(LoraConfig {
            target_sites: vec![],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!("ffn_out".parse::<LoraSite>().unwrap(), LoraSite::FfnOut);
    }
}
