//! Frozen copy of the starting checkpoint, queried for reference logits and
//! features. Results are cached by a content hash of the token sequence.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};
use crate::model::{checksum, forward, CaptureSite, TransformerWeights};
use crate::objectives::ReferenceView;

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceOutput<T> {
    pub logits: Tensor<T>,
    /// Captured tensors, layer-major, in the same order the student forward emits them.
    pub features: Vec<Tensor<T>>,
}

impl<T> ReferenceOutput<T> {
    pub fn view(&self) -> ReferenceView<'_, T> {
        ReferenceView {
            logits: &self.logits,
            features: &self.features,
        }
    }
}

struct CacheEntry<T> {
    tokens: Vec<usize>,
    site: Option<CaptureSite>,
    output: Arc<ReferenceOutput<T>>,
}

pub struct ReferenceModel<T> {
    weights: TransformerWeights<T>,
    checksum: String,
    cache_enabled: bool,
    cache: Mutex<HashMap<u64, CacheEntry<T>>>,
    forwards: AtomicU64,
}

/// Content fingerprint of a query: SHA-256 over the capture site and token ids.
pub fn fingerprint(tokens: &[usize], site: Option<CaptureSite>) -> u64 {
    let mut h = Sha256::new();
    h.update(site.map_or("none", CaptureSite::name).as_bytes());
    h.update([0u8]);
    for &t in tokens {
        h.update((t as u32).to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl<T: Real> ReferenceModel<T> {
    pub fn new(weights: TransformerWeights<T>, cache_enabled: bool) -> Self {
        let checksum = checksum(&weights, None);
        ReferenceModel {
            weights,
            checksum,
            cache_enabled,
            cache: Mutex::new(HashMap::new()),
            forwards: AtomicU64::new(0),
        }
    }

    pub fn weights(&self) -> &TransformerWeights<T> {
        &self.weights
    }

    /// Checksum taken at construction.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn cache_enabled(&self) -> bool {
        self.cache_enabled
    }

    /// Reference forwards actually executed (cache hits excluded).
    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn cached_entries(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    /// Recompute the weight checksum and compare with the one taken at construction.
    pub fn verify(&self) -> Result<()> {
        let now = checksum(&self.weights, None);
        if now != self.checksum {
            return Err(Error::CacheIntegrity(format!(
                "reference weights changed: {} -> {now}",
                self.checksum
            )));
        }
        Ok(())
    }

    fn compute(&self, tokens: &[usize], site: Option<CaptureSite>) -> Result<ReferenceOutput<T>> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let (logits, capture) = forward(&self.weights, None, tokens, site)?;
        let features = capture.map_or_else(Vec::new, |c| c.layers.into_iter().flatten().collect());
        Ok(ReferenceOutput { logits, features })
    }

    /// Gradient-free logits (and features at `site`) for `tokens`.
    pub fn reference_logits(&self, tokens: &[usize], site: Option<CaptureSite>) -> Result<Arc<ReferenceOutput<T>>> {
        if !self.cache_enabled {
            return Ok(Arc::new(self.compute(tokens, site)?));
        }
        let key = fingerprint(tokens, site);
        if let Some(hit) = self.lookup(key, tokens, site)? {
            return Ok(hit);
        }
        let out = Arc::new(self.compute(tokens, site)?);
        let mut cache = self.cache.lock().expect("cache lock");
        let entry = cache.entry(key).or_insert_with(|| CacheEntry {
            tokens: tokens.to_vec(),
            site,
            output: Arc::clone(&out),
        });
        if entry.tokens != tokens || entry.site != site {
            return Err(collision(key));
        }
        Ok(Arc::clone(&entry.output))
    }

    fn lookup(&self, key: u64, tokens: &[usize], site: Option<CaptureSite>) -> Result<Option<Arc<ReferenceOutput<T>>>> {
        let cache = self.cache.lock().expect("cache lock");
        match cache.get(&key) {
            Some(e) if e.tokens == tokens && e.site == site => Ok(Some(Arc::clone(&e.output))),
            Some(_) => Err(collision(key)),
            None => Ok(None),
        }
    }

    #[cfg(test)]
    fn plant(&self, key: u64, tokens: Vec<usize>, output: ReferenceOutput<T>) {
        self.cache.lock().unwrap().insert(
            key,
            CacheEntry {
                tokens,
                site: None,
                output: Arc::new(output),
            },
        );
    }
}

fn collision(key: u64) -> Error {
    Error::CacheIntegrity(format!("fingerprint {key:016x} maps to a different token sequence"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> TransformerWeights<f32> {
        TransformerWeights::init(&ModelConfig {
            vocab_size: 13,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            seed: 4,
            tie_embeddings: false,
        })
        .unwrap()
    }

    #[test]
    fn cache_hit_is_bitwise_and_skips_forward() {
        let r = ReferenceModel::new(tiny(), true);
        let a = r.reference_logits(&[1, 2, 3], None).unwrap();
        let b = r.reference_logits(&[1, 2, 3], None).unwrap();
        assert!(a.logits.bitwise_eq(&b.logits));
        assert_eq!(r.forward_count(), 1);
        let fresh = forward(r.weights(), None, &[1, 2, 3], None).unwrap().0;
        assert!(fresh.bitwise_eq(&a.logits));
    }

    #[test]
    fn uncached_runs_every_time() {
        let r = ReferenceModel::new(tiny(), false);
        for _ in 0..3 {
            r.reference_logits(&[4, 5], Some(CaptureSite::Ffn)).unwrap();
        }
        assert_eq!(r.forward_count(), 3);
        assert_eq!(r.cached_entries(), 0);
    }

    #[test]
    fn site_is_part_of_the_key() {
        let r = ReferenceModel::new(tiny(), true);
        let plain = r.reference_logits(&[1, 2], None).unwrap();
        let feat = r.reference_logits(&[1, 2], Some(CaptureSite::AttnAll)).unwrap();
        assert!(plain.features.is_empty());
        assert_eq!(feat.features.len(), 8);
        assert_eq!(r.forward_count(), 2);
    }

    #[test]
    fn collision_is_an_integrity_error() {
        let r = ReferenceModel::new(tiny(), true);
        let key = fingerprint(&[7, 7], None);
        let out = (*r.reference_logits(&[1], None).unwrap()).clone();
        r.plant(key, vec![9, 9], out);
        assert!(matches!(r.reference_logits(&[7, 7], None), Err(Error::CacheIntegrity(_))));
    }

    #[test]
    fn checksum_is_stable() {
        let r = ReferenceModel::new(tiny(), true);
        r.reference_logits(&[1, 2, 3], None).unwrap();
        r.verify().unwrap();
        assert_eq!(r.checksum(), checksum(&tiny(), None));
    }
}
