//! External memory: content-addressed sparse reads, LRU-interpolated sparse
//! writes with erase, usage tracking, and the mutation journal that lets the
//! backward pass roll the memory back one step at a time.

mod grad;
mod read;
pub mod ring;
mod write;

use std::hash::Hasher;

use serde::{Deserialize, Serialize};

use crate::ann::{AnnConfig, AnnIndex, Metric};
use crate::error::{check_dim, Error, Result};
use crate::la::{norm, DenseMatrix};

pub use grad::MemoryGrad;
pub use read::{ContentWeights, ReadGrads, SparseReadResult};
pub use ring::UsageRing;
pub use write::{interpolate_write, HeadWrite, Journal, WriteGrads, WriteJournalEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UsageMode {
    /// λ-discounted sum of read and write weights.
    Discounted,
    /// Steps since the last access above δ, tracked by a ring.
    Lru,
}

/// How the backward pass restores earlier memory contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rollback {
    /// Store only the rows each step overwrote.
    Journal,
    /// Store a full copy of the memory every step.
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    pub slots: usize,
    pub word_size: usize,
    pub k: usize,
    pub heads: usize,
    pub usage: UsageMode,
    pub delta: f64,
    pub lambda: f64,
    /// Full-N softmax addressing, no sparsification.
    pub dense: bool,
    pub rollback: Rollback,
    pub ann: AnnConfig,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            slots: 128,
            word_size: 32,
            k: 4,
            heads: 4,
            usage: UsageMode::Lru,
            delta: 0.005,
            lambda: 0.99,
            dense: false,
            rollback: Rollback::Journal,
            ann: AnnConfig::exact(),
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 || self.slots >= u32::MAX as usize {
            return Err(Error::config("slots", "must be in 1..2^32-1"));
        }
        if self.word_size == 0 {
            return Err(Error::config("word_size", "must be at least 1"));
        }
        if self.k == 0 || self.k > self.slots {
            return Err(Error::config("k", "must satisfy 1 ≤ k ≤ slots"));
        }
        if self.heads == 0 || self.heads > self.slots {
            return Err(Error::config("heads", "must satisfy 1 ≤ heads ≤ slots"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta", "must lie in (0, 1)"));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::config("lambda", "must lie in (0, 1)"));
        }
        if self.ann.metric != Metric::Cosine {
            return Err(Error::config("metric", "memory addressing uses cosine similarity"));
        }
        self.ann.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Usage {
    Discounted(Vec<f64>),
    Lru {
        /// Step of the last access above δ; 0 = never.
        last_access: Vec<u64>,
        ring: UsageRing,
    },
}

/// Memory contents plus everything derived from them.
#[derive(Debug, Clone)]
pub struct MemoryState {
    config: MemoryConfig,
    memory: DenseMatrix,
    usage: Usage,
    /// Absent in dense mode, which scans every row.
    index: Option<AnnIndex>,
    step: u64,
}

impl MemoryState {
    /// All-zero memory at step 0.
    pub fn new(config: MemoryConfig) -> Result<Self> {
        let m = DenseMatrix::zeros(config.slots, config.word_size);
        Self::with_memory(config, m)
    }

    /// Starts from the given contents; nonzero rows are indexed.
    pub fn with_memory(config: MemoryConfig, memory: DenseMatrix) -> Result<Self> {
        config.validate()?;
        check_dim("MemoryState rows", config.slots, memory.rows())?;
        check_dim("MemoryState cols", config.word_size, memory.cols())?;
        let index = if config.dense {
            None
        } else {
            Some(AnnIndex::build(&memory, config.ann.clone())?)
        };
        let usage = match config.usage {
            UsageMode::Discounted => Usage::Discounted(vec![0.0; config.slots]),
            UsageMode::Lru => Usage::Lru {
                last_access: vec![0; config.slots],
                ring: UsageRing::new(config.slots),
            },
        };
        Ok(MemoryState {
            config,
            memory,
            usage,
            index,
            step: 0,
        })
    }

    /// Reassembles a state from its parts, rebuilding the index.
    pub fn from_parts(
        config: MemoryConfig,
        memory: DenseMatrix,
        usage: Usage,
        step: u64,
    ) -> Result<Self> {
        let mut s = Self::with_memory(config, memory)?;
        match (&usage, s.config.usage) {
            (Usage::Discounted(u), UsageMode::Discounted) => {
                check_dim("usage", s.config.slots, u.len())?
            }
            (Usage::Lru { last_access, ring }, UsageMode::Lru) => {
                check_dim("usage", s.config.slots, last_access.len())?;
                check_dim("ring", s.config.slots, ring.len())?;
                if !ring.is_consistent() || last_access.iter().any(|&a| a > step) {
                    return Err(Error::Format("inconsistent usage ring".into()));
                }
            }
            _ => return Err(Error::Format("usage kind does not match config".into())),
        }
        s.usage = usage;
        s.step = step;
        Ok(s)
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn memory(&self) -> &DenseMatrix {
        &self.memory
    }

    pub fn usage(&self) -> &Usage {
        &self.usage
    }

    pub fn index(&self) -> Option<&AnnIndex> {
        self.index.as_ref()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> usize {
        self.config.slots
    }

    pub fn word_size(&self) -> usize {
        self.config.word_size
    }

    /// Least-used slot, ties to the lowest index.
    pub fn lru_indicator(&self) -> usize {
        self.lru_slots(1)[0]
    }

    /// The `count` least-used distinct slots, least used first.
    pub fn lru_slots(&self, count: usize) -> Vec<usize> {
        let count = count.min(self.config.slots);
        match &self.usage {
            Usage::Lru { ring, .. } => ring.iter().take(count).collect(),
            Usage::Discounted(u) => {
                let mut best: Vec<(f64, usize)> = Vec::with_capacity(count + 1);
                for (i, &v) in u.iter().enumerate() {
                    if best.len() == count && v >= best[count - 1].0 {
                        continue;
                    }
                    let pos = best.partition_point(|&(b, _)| b <= v);
                    best.insert(pos, (v, i));
                    best.truncate(count);
                }
                best.into_iter().map(|(_, i)| i).collect()
            }
        }
    }

    /// Usage of every slot in U(2) form (steps since last access) or U(1).
    pub fn usage_values(&self) -> Vec<f64> {
        match &self.usage {
            Usage::Discounted(u) => u.clone(),
            Usage::Lru { last_access, .. } => last_access
                .iter()
                .map(|&a| (self.step - a) as f64)
                .collect(),
        }
    }

    /// Whether row `i` can be addressed by content.
    #[inline]
    pub(crate) fn is_addressable(&self, i: usize) -> bool {
        match &self.index {
            Some(ix) => ix.contains(i),
            None => norm(self.memory.row(i)) > 0.0,
        }
    }

    /// Stable hash over memory, usage, ring order, index and step.
    pub fn state_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        h.write_u64(self.step);
        for x in self.memory.data() {
            h.write_u64(x.to_bits());
        }
        match &self.usage {
            Usage::Discounted(u) => u.iter().for_each(|x| h.write_u64(x.to_bits())),
            Usage::Lru { last_access, ring } => {
                last_access.iter().for_each(|&a| h.write_u64(a));
                ring.iter().for_each(|s| h.write_usize(s));
            }
        }
        if let Some(ix) = &self.index {
            ix.hash_into(&mut h);
        }
        h.finish()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn config(n: usize, m: usize, k: usize, heads: usize) -> MemoryConfig {
        MemoryConfig {
            slots: n,
            word_size: m,
            k,
            heads,
            ..MemoryConfig::default()
        }
    }

    pub(crate) fn random_memory(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DenseMatrix {
        let data = (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        DenseMatrix::from_vec(n, m, data).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(config(8, 4, 4, 1).validate().is_ok());
        assert!(config(8, 4, 0, 1).validate().is_err());
        assert!(config(8, 4, 9, 1).validate().is_err());
        let mut c = config(8, 4, 2, 1);
        c.delta = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "delta"));
        c.delta = 0.005;
        c.lambda = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn fresh_memory_lru_is_slot_zero() {
        let s = MemoryState::new(config(16, 4, 2, 1)).unwrap();
        assert_eq!(s.lru_indicator(), 0);
        let mut c = config(16, 4, 2, 1);
        c.usage = UsageMode::Discounted;
        let s = MemoryState::new(c).unwrap();
        assert_eq!(s.lru_indicator(), 0);
        assert_eq!(s.lru_slots(3), vec![0, 1, 2]);
    }

    #[test]
    fn discounted_lru_picks_smallest_usage() {
        let mut c = config(5, 2, 1, 1);
        c.usage = UsageMode::Discounted;
        let mut s = MemoryState::new(c).unwrap();
        s.usage = Usage::Discounted(vec![0.5, 0.1, 0.3, 0.1, 0.0]);
        assert_eq!(s.lru_slots(3), vec![4, 1, 3]);
    }

    #[test]
    fn hash_sees_memory_and_ring() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_memory(&mut rng, 8, 3);
        let a = MemoryState::with_memory(config(8, 3, 2, 1), m.clone()).unwrap();
        let b = MemoryState::with_memory(config(8, 3, 2, 1), m).unwrap();
        assert_eq!(a.state_hash(), b.state_hash());
        let mut c = b.clone();
        if let Usage::Lru { ring, .. } = &mut c.usage {
            ring.touch(0);
        }
        assert_ne!(a.state_hash(), c.state_hash());
    }
}
