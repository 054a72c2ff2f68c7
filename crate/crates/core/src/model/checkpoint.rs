//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "SAUGCKPT"
//! u32       format version (1)
//! u32       header length H
//! H bytes   UTF-8 JSON header: {"version", "precision", "seed", "model", "lora"[, "meta"]}
//! u32       tensor count N
//! N times:
//!   u16     name length L, then L bytes of UTF-8 name
//!   u8      rank R, then R × u32 extents
//!   numel × element (f32 or f64 per header precision)
//! ```
//!
//! Base weights are named `model/<param>` in canonical parameter order,
//! adapters `lora/layers.<i>.<site>.{a,b}`. Trainer resume files append
//! optimizer moments under `optim/` and carry a free-form `meta` object.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, TransformerWeights};
use crate::autograd::{Precision, Real, Tensor};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapters, LoraConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SAUGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    precision: Precision,
    seed: u64,
    model: ModelConfig,
    lora: Option<LoraConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub weights: TransformerWeights<T>,
    pub lora: Option<LoraAdapters<T>>,
    pub meta: Option<serde_json::Value>,
    /// Tensors under the `optim/` namespace, in file order.
    pub extra: Vec<(String, Tensor<T>)>,
}

fn write_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode<T: Real>(weights: &TransformerWeights<T>, lora: Option<&LoraAdapters<T>>) -> Vec<u8> {
    encode_with(weights, lora, None, &[])
}

/// Encode with trainer metadata and extra `optim/` tensors.
pub fn encode_with<T: Real>(
    weights: &TransformerWeights<T>,
    lora: Option<&LoraAdapters<T>>,
    meta: Option<serde_json::Value>,
    extra: &[(String, Tensor<T>)],
) -> Vec<u8> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        precision: T::PRECISION,
        seed: weights.config.seed,
        model: weights.config.clone(),
        lora: lora.map(|l| l.config.clone()),
        meta,
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let mut tensors: Vec<(String, &Tensor<T>)> = weights
        .params
        .named()
        .into_iter()
        .map(|(n, t)| (format!("model/{n}"), t))
        .collect();
    if let Some(l) = lora {
        tensors.extend(l.params.named().into_iter().map(|(n, t)| (format!("lora/{n}"), t)));
    }
    tensors.extend(extra.iter().map(|(n, t)| (format!("optim/{n}"), t)));

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        write_tensor(&mut out, &name, t);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)?;
    if header.precision != T::PRECISION {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, caller asked for {}",
            header.precision,
            T::PRECISION
        )));
    }

    let mut weights = TransformerWeights::<T>::init(&header.model)?;
    let mut lora = match &header.lora {
        Some(cfg) => Some(LoraAdapters::<T>::init(cfg, &header.model, 0)?),
        None => None,
    };
    let count = r.u32()? as usize;
    let width = T::PRECISION.byte_width();
    let mut seen = Vec::with_capacity(count);
    let mut extra = Vec::new();
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * width)?;
        let data: Vec<T> = raw.chunks_exact(width).map(T::read_le).collect();
        let tensor = Tensor::new(&shape, data)?;
        if let Some(rest) = name.strip_prefix("optim/") {
            extra.push((rest.to_string(), tensor));
            continue;
        }
        if seen.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        place(&name, tensor, &mut weights, lora.as_mut())?;
        seen.push(name);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let expected = weights.params.named().len() + lora.as_ref().map_or(0, |l| l.params.named().len());
    if seen.len() != expected {
        return Err(Error::Checkpoint(format!("expected {expected} tensors, found {}", seen.len())));
    }
    Ok(Checkpoint {
        weights,
        lora,
        meta: header.meta,
        extra,
    })
}

fn place<T: Real>(
    name: &str,
    tensor: Tensor<T>,
    weights: &mut TransformerWeights<T>,
    lora: Option<&mut LoraAdapters<T>>,
) -> Result<()> {
    fn index_of(names: Vec<String>, key: &str) -> Option<usize> {
        names.iter().position(|n| n == key)
    }
    let unknown = || Error::Checkpoint(format!("unknown tensor {name}"));
    let slot = if let Some(rest) = name.strip_prefix("model/") {
        let names = weights.params.named().into_iter().map(|(n, _)| n).collect();
        let idx = index_of(names, rest).ok_or_else(unknown)?;
        weights.params.slots_mut().swap_remove(idx)
    } else if let Some(rest) = name.strip_prefix("lora/") {
        let l = lora.ok_or_else(|| Error::Checkpoint(format!("{name} present but header has no lora config")))?;
        let names = l.params.named().into_iter().map(|(n, _)| n).collect();
        let idx = index_of(names, rest).ok_or_else(unknown)?;
        l.params.slots_mut().swap_remove(idx)
    } else {
        return Err(Error::Checkpoint(format!("unknown namespace in {name}")));
    };
    if slot.shape() != tensor.shape() {
        return Err(Error::shape("checkpoint tensor", slot.shape(), tensor.shape()));
    }
    *slot = tensor;
    Ok(())
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    weights: &TransformerWeights<T>,
    lora: Option<&LoraAdapters<T>>,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode(weights, lora)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// SHA-256 of the encoded checkpoint, hex.
pub fn checksum<T: Real>(weights: &TransformerWeights<T>, lora: Option<&LoraAdapters<T>>) -> String {
    let digest = Sha256::digest(encode(weights, lora));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
