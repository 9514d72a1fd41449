//! Random-hyperplane LSH with OR-amplification across tables.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{AnnConfig, Scorer, TopK, VectorStore};
use crate::la::dot;

#[derive(Debug, Clone)]
pub struct LshTables {
    dim: usize,
    bits: usize,
    /// tables × bits × dim Gaussian normals, fixed for the life of the index.
    planes: Vec<f64>,
    buckets: Vec<HashMap<u64, Vec<u32>>>,
}

impl LshTables {
    pub(super) fn build(config: &AnnConfig, store: &VectorStore) -> LshTables {
        let dim = store.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x15A_0000_0000);
        let planes = (0..config.lsh_tables * config.lsh_bits * dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let mut t = LshTables {
            dim,
            bits: config.lsh_bits,
            planes,
            buckets: vec![HashMap::new(); config.lsh_tables],
        };
        for s in store.live_slots() {
            t.insert(s, store.get(s));
        }
        t
    }

    fn signature(&self, table: usize, v: &[f64]) -> u64 {
        let mut sig = 0u64;
        for b in 0..self.bits {
            let off = (table * self.bits + b) * self.dim;
            if dot(&self.planes[off..off + self.dim], v) >= 0.0 {
                sig |= 1 << b;
            }
        }
        sig
    }

    pub(super) fn insert(&mut self, slot: usize, v: &[f64]) {
        for t in 0..self.buckets.len() {
            let sig = self.signature(t, v);
            let bucket = self.buckets[t].entry(sig).or_default();
            let pos = bucket.binary_search(&(slot as u32)).unwrap_or_else(|p| p);
            bucket.insert(pos, slot as u32);
        }
    }

    pub(super) fn remove(&mut self, slot: usize, v: &[f64]) {
        for t in 0..self.buckets.len() {
            let sig = self.signature(t, v);
            if let Some(bucket) = self.buckets[t].get_mut(&sig) {
                if let Ok(pos) = bucket.binary_search(&(slot as u32)) {
                    bucket.remove(pos);
                }
                if bucket.is_empty() {
                    self.buckets[t].remove(&sig);
                }
            }
        }
    }

    pub(super) fn query(&self, scorer: &Scorer<'_>, q: &[f64], k: usize) -> Vec<(usize, f64)> {
        let sigs: Vec<u64> = (0..self.buckets.len()).map(|t| self.signature(t, q)).collect();
        let mut candidates: Vec<u32> = Vec::new();
        for (t, sig) in sigs.iter().enumerate() {
            if let Some(b) = self.buckets[t].get(sig) {
                candidates.extend_from_slice(b);
            }
        }
        candidates.sort_unstable();
        candidates.dedup();
        if candidates.len() < k {
            // multi-probe: buckets one bit flip away
            for (t, sig) in sigs.iter().enumerate() {
                for b in 0..self.bits {
                    if let Some(bucket) = self.buckets[t].get(&(sig ^ (1 << b))) {
                        candidates.extend_from_slice(bucket);
                    }
                }
            }
            candidates.sort_unstable();
            candidates.dedup();
        }
        if candidates.is_empty() {
            candidates = scorer.store().live_slots().map(|s| s as u32).collect();
        }
        let mut top = TopK::new(k);
        for s in candidates {
            top.push(s as usize, scorer.score(q, s as usize));
        }
        top.into_vec()
    }

    pub(super) fn hash_into<H: std::hash::Hasher>(&self, h: &mut H) {
        for table in &self.buckets {
            let mut keys: Vec<&u64> = table.keys().collect();
            keys.sort_unstable();
            for k in keys {
                h.write_u64(*k);
                table[k].iter().for_each(|&s| h.write_u32(s));
            }
        }
    }

    pub(super) fn payload_bytes(&self) -> usize {
        self.planes.len() * 8
            + self
                .buckets
                .iter()
                .flat_map(|m| m.values())
                .map(|b| 8 + b.len() * 4)
                .sum::<usize>()
    }
}
