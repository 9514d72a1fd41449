use super::ring::RingMove;
use super::{MemoryGrad, MemoryState, Rollback, Usage};
use crate::ann::AnnChange;
use crate::error::{check_dim, Error, Result};
use crate::la::{axpy, dot, norm, row_zero, sparse_outer_add, DenseMatrix, SparseVector};

/// `α(γ·prev_read + (1−γ)·e_lru)`.
pub fn interpolate_write(
    alpha: f64,
    gamma: f64,
    prev_read: &SparseVector,
    lru_slot: usize,
) -> Result<SparseVector> {
    let ag = alpha * gamma;
    let mut pairs: Vec<(usize, f64)> = prev_read
        .entries()
        .iter()
        .map(|&(i, v)| (i, ag * v))
        .collect();
    pairs.push((lru_slot, alpha * (1.0 - gamma)));
    SparseVector::from_pairs(prev_read.dim(), pairs)
}

/// One head's write at one step, with the inputs needed for its backward.
#[derive(Debug, Clone)]
pub struct HeadWrite {
    pub alpha: f64,
    pub gamma: f64,
    pub prev_read: SparseVector,
    pub lru_slot: usize,
    pub weights: SparseVector,
    pub add: Vec<f64>,
}

impl HeadWrite {
    pub fn new(
        alpha: f64,
        gamma: f64,
        prev_read: SparseVector,
        lru_slot: usize,
        add: Vec<f64>,
    ) -> Result<Self> {
        let weights = interpolate_write(alpha, gamma, &prev_read, lru_slot)?;
        Ok(HeadWrite {
            alpha,
            gamma,
            prev_read,
            lru_slot,
            weights,
            add,
        })
    }

    fn bytes(&self) -> usize {
        std::mem::size_of::<HeadWrite>()
            + self.prev_read.payload_bytes()
            + self.weights.payload_bytes()
            + self.add.len() * 8
    }
}

#[derive(Debug)]
enum UsageUndo {
    Pending,
    Lru(Vec<(u32, u64, RingMove)>),
    Discounted(Vec<f64>),
}

/// Everything needed to undo one step's memory mutations.
#[derive(Debug)]
pub struct WriteJournalEntry {
    step: u64,
    heads: Vec<HeadWrite>,
    prior_slots: Vec<usize>,
    prior_rows: Vec<f64>,
    checkpoint: Option<Vec<f64>>,
    ann: Vec<AnnChange>,
    usage: UsageUndo,
    reverted: bool,
}

impl WriteJournalEntry {
    /// Step counter value after the write was applied.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn heads(&self) -> &[HeadWrite] {
        &self.heads
    }

    /// Rows whose previous contents were saved.
    pub fn touched_slots(&self) -> &[usize] {
        &self.prior_slots
    }

    pub fn is_reverted(&self) -> bool {
        self.reverted
    }

    /// Bytes held by the entry: fixed header plus every owned buffer.
    pub fn bytes(&self) -> usize {
        let usage = match &self.usage {
            UsageUndo::Pending => 0,
            UsageUndo::Lru(v) => v.len() * std::mem::size_of::<(u32, u64, RingMove)>(),
            UsageUndo::Discounted(v) => v.len() * 8,
        };
        std::mem::size_of::<WriteJournalEntry>()
            + self.heads.iter().map(HeadWrite::bytes).sum::<usize>()
            + self.prior_slots.len() * std::mem::size_of::<usize>()
            + self.prior_rows.len() * 8
            + self.checkpoint.as_ref().map_or(0, |c| c.len() * 8)
            + self.ann.iter().map(AnnChange::bytes).sum::<usize>()
            + usage
    }

    /// Backward through `M_t = (M_{t−1} with LRU rows zeroed) + Σ_h w_h a_hᵀ`
    /// and the write-weight interpolation. `d_mem` enters as the gradient
    /// for `M_t` and leaves as the gradient for `M_{t−1}`. Nothing flows
    /// through the choice of LRU slot.
    pub fn backward(&self, d_mem: &mut MemoryGrad) -> Result<Vec<WriteGrads>> {
        if d_mem.step() != self.step {
            return Err(Error::JournalDesync {
                step: self.step,
                reason: format!("write backward given gradient for step {}", d_mem.step()),
            });
        }
        let mut out = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let m = h.add.len();
            let mut d_add = vec![0.0; m];
            for &(i, w) in h.weights.entries() {
                if let Some(g) = d_mem.row(i) {
                    axpy(w, g, &mut d_add);
                }
            }
            let dw = |i: usize| d_mem.row(i).map_or(0.0, |g| dot(&h.add, g));
            let dw_lru = dw(h.lru_slot);
            let mut d_alpha = (1.0 - h.gamma) * dw_lru;
            let mut d_gamma = -dw_lru;
            let mut d_prev = Vec::with_capacity(h.prev_read.nnz());
            for &(i, p) in h.prev_read.entries() {
                let g = dw(i);
                d_alpha += g * h.gamma * p;
                d_gamma += g * p;
                d_prev.push((i, h.alpha * h.gamma * g));
            }
            out.push(WriteGrads {
                d_alpha,
                d_gamma: h.alpha * d_gamma,
                d_add,
                d_prev_read: SparseVector::from_pairs(h.prev_read.dim(), d_prev)?,
            });
        }
        for h in &self.heads {
            d_mem.zero_row(h.lru_slot);
        }
        d_mem.set_step(self.step - 1);
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct WriteGrads {
    pub d_alpha: f64,
    pub d_gamma: f64,
    pub d_add: Vec<f64>,
    pub d_prev_read: SparseVector,
}

/// Stack of journal entries, reverted newest first.
#[derive(Debug, Default)]
pub struct Journal {
    entries: Vec<WriteJournalEntry>,
}

impl Journal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: WriteJournalEntry) {
        self.entries.push(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last(&self) -> Option<&WriteJournalEntry> {
        self.entries.last()
    }

    pub fn last_mut(&mut self) -> Option<&mut WriteJournalEntry> {
        self.entries.last_mut()
    }

    /// Reverts the newest entry and hands it back for the backward pass.
    pub fn revert_last(&mut self, state: &mut MemoryState) -> Result<WriteJournalEntry> {
        let mut entry = self
            .entries
            .pop()
            .ok_or_else(|| Error::Contract("revert on an empty journal".into()))?;
        state.revert_write(&mut entry)?;
        Ok(entry)
    }

    pub fn bytes(&self) -> usize {
        self.entries.iter().map(WriteJournalEntry::bytes).sum()
    }
}

impl MemoryState {
    /// Write weights for one head using the current least-used slot.
    pub fn write_weights(
        &self,
        alpha: f64,
        gamma: f64,
        prev_read: &SparseVector,
    ) -> Result<SparseVector> {
        interpolate_write(alpha, gamma, prev_read, self.lru_indicator())
    }

    /// Zeroes every head's LRU row, then adds `Σ_h w_h a_hᵀ`, refreshing
    /// the index for every touched row. Advances the step counter; usage is
    /// updated separately by [`MemoryState::record_access`] once the step's
    /// reads are known.
    pub fn apply_write(&mut self, heads: Vec<HeadWrite>) -> Result<WriteJournalEntry> {
        let (n, m) = (self.slots(), self.word_size());
        let mut touched = Vec::new();
        for h in &heads {
            check_dim("apply_write add", m, h.add.len())?;
            check_dim("apply_write weights", n, h.weights.dim())?;
            if h.lru_slot >= n {
                return Err(Error::IndexOutOfRange {
                    context: "apply_write lru slot",
                    index: h.lru_slot,
                    len: n,
                });
            }
            if h.add.iter().any(|x| !x.is_finite())
                || h.weights.entries().iter().any(|(_, v)| !v.is_finite())
            {
                return Err(Error::NonFinite("apply_write".into()));
            }
            if !self.config.dense {
                h.weights.check_capacity(self.config.k + 1)?;
            }
            touched.push(h.lru_slot);
            touched.extend(h.weights.indices());
        }
        touched.sort_unstable();
        touched.dedup();

        let (prior_slots, prior_rows, checkpoint) = match self.config.rollback {
            Rollback::Journal => {
                let mut rows = Vec::with_capacity(touched.len() * m);
                for &i in &touched {
                    rows.extend_from_slice(self.memory.row(i));
                }
                (touched.clone(), rows, None)
            }
            Rollback::Checkpoint => (Vec::new(), Vec::new(), Some(self.memory.data().to_vec())),
        };

        for h in &heads {
            row_zero(&mut self.memory, h.lru_slot)?;
        }
        for h in &heads {
            sparse_outer_add(&mut self.memory, &h.weights, &h.add, 1.0)?;
        }

        let mut ann = Vec::new();
        if let Some(ix) = &mut self.index {
            for &i in &touched {
                ann.extend(ix.remove(i));
                let row = self.memory.row(i);
                let rn = norm(row);
                if rn > 0.0 && rn.is_finite() {
                    ann.push(ix.insert(i, row)?);
                }
            }
        }
        self.step += 1;
        Ok(WriteJournalEntry {
            step: self.step,
            heads,
            prior_slots,
            prior_rows,
            checkpoint,
            ann,
            usage: UsageUndo::Pending,
            reverted: false,
        })
    }

    /// Counts this step's accesses: `Σ_h w^W_h + Σ_h w^R_h` per slot. Under
    /// LRU usage every slot above δ is stamped with the current step and
    /// moved to the back of the ring, in increasing slot order.
    pub fn record_access(
        &mut self,
        entry: &mut WriteJournalEntry,
        reads: &[&SparseVector],
    ) -> Result<()> {
        if entry.step != self.step || entry.reverted {
            return Err(Error::Contract(format!(
                "record_access for step {} at step {}",
                entry.step, self.step
            )));
        }
        if !matches!(entry.usage, UsageUndo::Pending) {
            return Err(Error::Contract("accesses already recorded".into()));
        }
        let mut pairs: Vec<(usize, f64)> = Vec::new();
        for h in &entry.heads {
            pairs.extend_from_slice(h.weights.entries());
        }
        for r in reads {
            check_dim("record_access reads", self.slots(), r.dim())?;
            pairs.extend_from_slice(r.entries());
        }
        pairs.sort_by_key(|&(i, _)| i);
        let mut access: Vec<(usize, f64)> = Vec::with_capacity(pairs.len());
        for (i, v) in pairs {
            match access.last_mut() {
                Some((j, acc)) if *j == i => *acc += v,
                _ => access.push((i, v)),
            }
        }
        let step = self.step;
        entry.usage = match &mut self.usage {
            Usage::Lru { last_access, ring } => {
                let mut moves = Vec::new();
                for (i, a) in access {
                    if a > self.config.delta {
                        moves.push((i as u32, last_access[i], ring.touch(i)));
                        last_access[i] = step;
                    }
                }
                UsageUndo::Lru(moves)
            }
            Usage::Discounted(u) => {
                let old = u.clone();
                let lambda = self.config.lambda;
                u.iter_mut().for_each(|x| *x *= lambda);
                for (i, a) in access {
                    u[i] += a;
                }
                UsageUndo::Discounted(old)
            }
        };
        Ok(())
    }

    /// Restores the state from before `entry` was applied. Entries must be
    /// reverted newest first.
    pub fn revert_write(&mut self, entry: &mut WriteJournalEntry) -> Result<()> {
        if entry.reverted || entry.step != self.step {
            return Err(Error::Contract(format!(
                "out-of-order revert of step {} at step {}",
                entry.step, self.step
            )));
        }
        match (std::mem::replace(&mut entry.usage, UsageUndo::Pending), &mut self.usage) {
            (UsageUndo::Pending, _) => {}
            (UsageUndo::Lru(moves), Usage::Lru { last_access, ring }) => {
                for (slot, prev, mv) in moves.into_iter().rev() {
                    ring.undo(mv);
                    last_access[slot as usize] = prev;
                }
            }
            (UsageUndo::Discounted(old), Usage::Discounted(u)) => *u = old,
            _ => return Err(Error::Contract("usage undo of the wrong kind".into())),
        }
        if let Some(ix) = &mut self.index {
            for change in std::mem::take(&mut entry.ann).into_iter().rev() {
                ix.undo(change)?;
            }
        }
        let m = self.word_size();
        if let Some(cp) = entry.checkpoint.take() {
            self.memory.data_mut().copy_from_slice(&cp);
        } else {
            for (k, &i) in entry.prior_slots.iter().enumerate() {
                self.memory
                    .row_mut(i)
                    .copy_from_slice(&entry.prior_rows[k * m..(k + 1) * m]);
            }
        }
        self.step -= 1;
        entry.reverted = true;
        Ok(())
    }

    /// See [`WriteJournalEntry::backward`].
    pub fn write_backward(
        &self,
        entry: &WriteJournalEntry,
        d_mem: &mut MemoryGrad,
    ) -> Result<Vec<WriteGrads>> {
        entry.backward(d_mem)
    }

    /// Zero-gradient buffer matching this state's representation.
    pub fn zero_grad(&self) -> MemoryGrad {
        if self.config.dense {
            MemoryGrad::dense(self.step, self.slots(), self.word_size())
        } else {
            MemoryGrad::sparse(self.step, self.slots(), self.word_size())
        }
    }

    /// Dense copy of the memory, for oracles.
    pub fn snapshot_memory(&self) -> DenseMatrix {
        self.memory.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{config, random_memory};
    use super::super::{MemoryConfig, UsageMode};
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
        (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// One full memory step with random controller outputs: write every head
    /// from its previous read weights, read, then record the accesses.
    fn random_step(
        s: &mut MemoryState,
        rng: &mut ChaCha8Rng,
        prev: &mut Vec<SparseVector>,
    ) -> WriteJournalEntry {
        let heads = prev.len();
        let m = s.word_size();
        let lru = s.lru_slots(heads);
        let writes = (0..heads)
            .map(|h| {
                HeadWrite::new(
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    prev[h].clone(),
                    lru[h],
                    rand_vec(rng, m),
                )
                .unwrap()
            })
            .collect();
        let mut entry = s.apply_write(writes).unwrap();
        let reads: Vec<SparseVector> = (0..heads)
            .map(|_| {
                let q = rand_vec(rng, m);
                s.content_weights(&q, rng.random_range(0.5..5.0)).unwrap().weights
            })
            .collect();
        s.record_access(&mut entry, &reads.iter().collect::<Vec<_>>()).unwrap();
        *prev = reads;
        entry
    }

    fn empty_reads(n: usize, heads: usize) -> Vec<SparseVector> {
        vec![SparseVector::new(n); heads]
    }

    #[test]
    fn interpolation_edge_cases() {
        let p = SparseVector::from_pairs(10, vec![(2, 0.25), (5, 0.75)]).unwrap();
        let w = interpolate_write(0.6, 1.0, &p, 7).unwrap();
        assert_eq!(w, p.scaled(0.6));
        let w = interpolate_write(0.6, 0.0, &p, 7).unwrap();
        assert_eq!(w.entries(), &[(7, 0.6)]);
        let w = interpolate_write(0.0, 0.3, &p, 7).unwrap();
        assert!(w.is_empty());
        let w = interpolate_write(1.0, 0.5, &p, 2).unwrap();
        assert!(w.nnz() <= 3);
        assert!((w.get(2) - 0.625).abs() < 1e-15);
    }

    fn dense_write_oracle(before: &DenseMatrix, heads: &[HeadWrite]) -> DenseMatrix {
        let (n, m) = (before.rows(), before.cols());
        let mut out = before.clone();
        for h in heads {
            for j in 0..m {
                out.set(h.lru_slot, j, 0.0);
            }
        }
        for h in heads {
            let w = h.weights.densify();
            for i in 0..n {
                for j in 0..m {
                    out.set(i, j, out.get(i, j) + w[i] * h.add[j]);
                }
            }
        }
        out
    }

    #[test]
    fn empty_write_still_erases_lru_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mem = random_memory(&mut rng, 8, 3);
        let mut s = MemoryState::with_memory(config(8, 3, 2, 1), mem.clone()).unwrap();
        let p = SparseVector::from_pairs(8, vec![(3, 1.0)]).unwrap();
        let h = HeadWrite::new(0.0, 0.5, p, s.lru_indicator(), vec![1.0; 3]).unwrap();
        assert!(h.weights.is_empty());
        let oracle = dense_write_oracle(&mem, std::slice::from_ref(&h));
        s.apply_write(vec![h]).unwrap();
        assert_eq!(s.memory(), &oracle);
        assert_eq!(s.memory().row(0), &[0.0; 3]);
        assert_eq!(s.memory().row(1), mem.row(1));
    }

    #[test]
    fn full_lru_write_replaces_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = MemoryState::with_memory(config(8, 3, 2, 1), random_memory(&mut rng, 8, 3))
            .unwrap();
        let a = vec![0.1, -0.7, 0.3];
        let h = HeadWrite::new(1.0, 0.0, SparseVector::new(8), 0, a.clone()).unwrap();
        s.apply_write(vec![h]).unwrap();
        assert_eq!(s.memory().row(0), a.as_slice());
    }

    #[test]
    fn random_writes_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mem = random_memory(&mut rng, 32, 6);
            let mut s = MemoryState::with_memory(config(32, 6, 4, 3), mem.clone()).unwrap();
            let lru = s.lru_slots(3);
            let heads: Vec<HeadWrite> = (0..3)
                .map(|h| {
                    let q = rand_vec(&mut rng, 6);
                    let p = s.content_weights(&q, 2.0).unwrap().weights;
                    HeadWrite::new(
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        p,
                        lru[h],
                        rand_vec(&mut rng, 6),
                    )
                    .unwrap()
                })
                .collect();
            let oracle = dense_write_oracle(&mem, &heads);
            s.apply_write(heads).unwrap();
            for (a, b) in s.memory().data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn apply_then_revert_restores_hash() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for backend in [
            crate::ann::AnnConfig::exact(),
            crate::ann::AnnConfig::kd_forest(2, 8),
            crate::ann::AnnConfig::lsh(4, 4),
        ] {
            let mut c = config(32, 4, 3, 2);
            c.ann = backend;
            let mut s = MemoryState::new(c).unwrap();
            let mut prev = empty_reads(32, 2);
            for _ in 0..10 {
                random_step(&mut s, &mut rng, &mut prev);
            }
            let before = s.state_hash();
            let mut e = random_step(&mut s, &mut rng, &mut prev);
            assert_ne!(s.state_hash(), before);
            s.revert_write(&mut e).unwrap();
            assert_eq!(s.state_hash(), before);
        }
    }

    #[test]
    fn long_replay_reverts_to_checkpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for usage in [UsageMode::Lru, UsageMode::Discounted] {
            let mut c = config(24, 5, 4, 2);
            c.usage = usage;
            c.ann = crate::ann::AnnConfig {
                rebuild_interval: Some(7),
                ..crate::ann::AnnConfig::kd_forest(3, 16)
            };
            let mut s = MemoryState::new(c).unwrap();
            let checkpoint = s.clone();
            let mut journal = Journal::new();
            let mut prev = empty_reads(24, 2);
            for _ in 0..100 {
                let e = random_step(&mut s, &mut rng, &mut prev);
                journal.push(e);
            }
            while !journal.is_empty() {
                journal.revert_last(&mut s).unwrap();
            }
            assert_eq!(s.memory(), checkpoint.memory());
            assert_eq!(s.usage(), checkpoint.usage());
            assert_eq!(s.step(), 0);
            assert_eq!(s.state_hash(), checkpoint.state_hash());
            assert!(journal.revert_last(&mut s).is_err());
        }
    }

    #[test]
    fn checkpoint_rollback_reverts_too() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut c = config(16, 4, 2, 1);
        c.rollback = Rollback::Checkpoint;
        let mut s = MemoryState::new(c).unwrap();
        let start = s.state_hash();
        let mut journal = Journal::new();
        let mut prev = empty_reads(16, 1);
        for _ in 0..20 {
            journal.push(random_step(&mut s, &mut rng, &mut prev));
        }
        assert!(journal.bytes() >= 20 * 16 * 4 * 8);
        while !journal.is_empty() {
            journal.revert_last(&mut s).unwrap();
        }
        assert_eq!(s.state_hash(), start);
    }

    #[test]
    fn out_of_order_revert_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = MemoryState::new(config(8, 2, 2, 1)).unwrap();
        let mut prev = empty_reads(8, 1);
        let mut first = random_step(&mut s, &mut rng, &mut prev);
        let mut second = random_step(&mut s, &mut rng, &mut prev);
        assert!(matches!(s.revert_write(&mut first), Err(Error::Contract(_))));
        s.revert_write(&mut second).unwrap();
        assert!(s.revert_write(&mut second).is_err());
        s.revert_write(&mut first).unwrap();
    }

    #[test]
    fn sequential_accesses_cycle_back_to_zero() {
        let n = 6;
        let mut s = MemoryState::new(config(n, 2, 1, 1)).unwrap();
        for i in 0..n {
            let h = HeadWrite::new(0.0, 0.0, SparseVector::new(n), s.lru_indicator(), vec![0.0; 2])
                .unwrap();
            let mut e = s.apply_write(vec![h]).unwrap();
            let r = SparseVector::one_hot(n, i, 1.0).unwrap();
            s.record_access(&mut e, &[&r]).unwrap();
        }
        assert_eq!(s.lru_indicator(), 0);
    }

    #[test]
    fn lru_matches_replay_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 12;
        let delta = 0.005;
        let mut s = MemoryState::new(config(n, 2, 3, 1)).unwrap();
        let mut log: Vec<Vec<(usize, f64)>> = Vec::new();
        for _ in 0..200 {
            let h = HeadWrite::new(0.0, 0.0, SparseVector::new(n), s.lru_indicator(), vec![0.0; 2])
                .unwrap();
            let mut e = s.apply_write(vec![h]).unwrap();
            let pairs: Vec<(usize, f64)> = (0..3)
                .map(|_| {
                    let v = if rng.random_bool(0.5) {
                        rng.random_range(0.0..0.004)
                    } else {
                        rng.random_range(0.01..1.0)
                    };
                    (rng.random_range(0..n), v)
                })
                .collect();
            let r = SparseVector::from_pairs(n, pairs.clone()).unwrap();
            s.record_access(&mut e, &[&r]).unwrap();
            log.push(r.entries().to_vec());
            let mut last = vec![0usize; n];
            for (t, acc) in log.iter().enumerate() {
                for &(i, v) in acc {
                    if v > delta {
                        last[i] = t + 1;
                    }
                }
            }
            let brute = (0..n).min_by_key(|&i| (last[i], i)).unwrap();
            assert_eq!(s.lru_indicator(), brute);
        }
    }

    #[test]
    fn zero_gradient_in_zero_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = MemoryState::new(config(16, 4, 3, 2)).unwrap();
        let mut prev = empty_reads(16, 2);
        random_step(&mut s, &mut rng, &mut prev);
        let e = random_step(&mut s, &mut rng, &mut prev);
        let mut dm = s.zero_grad();
        let g = s.write_backward(&e, &mut dm).unwrap();
        for h in g {
            assert_eq!(h.d_alpha, 0.0);
            assert_eq!(h.d_gamma, 0.0);
            assert!(h.d_add.iter().all(|&x| x == 0.0));
            assert!(h.d_prev_read.entries().iter().all(|&(_, v)| v == 0.0));
        }
        assert_eq!(dm.step(), e.step() - 1);
    }

    /// L = Σ C ⊙ M_t for a fixed random C, written through one head.
    fn write_loss(
        mem: &DenseMatrix,
        c: &DenseMatrix,
        alpha: f64,
        gamma: f64,
        prev: &SparseVector,
        add: &[f64],
    ) -> f64 {
        let cfg = config(mem.rows(), mem.cols(), 4, 1);
        let mut s = MemoryState::with_memory(cfg, mem.clone()).unwrap();
        let h = HeadWrite::new(alpha, gamma, prev.clone(), 0, add.to_vec()).unwrap();
        s.apply_write(vec![h]).unwrap();
        s.memory().data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn write_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (n, m) = (8, 4);
        let eps = 1e-5;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-4);
        for gamma_fixed in [Some(1.0), None] {
            let mem = random_memory(&mut rng, n, m);
            let c = random_memory(&mut rng, n, m);
            let prev = SparseVector::from_pairs(n, vec![(0, 0.1), (2, 0.2), (5, 0.3), (6, 0.4)])
                .unwrap();
            let alpha = 0.7;
            let gamma = gamma_fixed.unwrap_or(0.35);
            let add = rand_vec(&mut rng, m);
            let cfg = config(n, m, 4, 1);
            let mut s = MemoryState::with_memory(cfg, mem.clone()).unwrap();
            let h = HeadWrite::new(alpha, gamma, prev.clone(), 0, add.clone()).unwrap();
            let e = s.apply_write(vec![h]).unwrap();
            let mut dm = s.zero_grad();
            for i in 0..n {
                dm.row_mut(i).copy_from_slice(c.row(i));
            }
            let g = s.write_backward(&e, &mut dm).unwrap().remove(0);

            let f = |a: f64, gm: f64, p: &SparseVector, ad: &[f64], mm: &DenseMatrix| {
                write_loss(mm, &c, a, gm, p, ad)
            };
            let fd = (f(alpha + eps, gamma, &prev, &add, &mem) - f(alpha - eps, gamma, &prev, &add, &mem))
                / (2.0 * eps);
            assert!(close(fd, g.d_alpha), "dα {fd} vs {}", g.d_alpha);
            let fd = (f(alpha, gamma + eps, &prev, &add, &mem) - f(alpha, gamma - eps, &prev, &add, &mem))
                / (2.0 * eps);
            assert!(close(fd, g.d_gamma), "dγ {fd} vs {}", g.d_gamma);
            for j in 0..m {
                let (mut ap, mut am) = (add.clone(), add.clone());
                ap[j] += eps;
                am[j] -= eps;
                let fd = (f(alpha, gamma, &prev, &ap, &mem) - f(alpha, gamma, &prev, &am, &mem)) / (2.0 * eps);
                assert!(close(fd, g.d_add[j]));
            }
            for &(i, p) in prev.entries() {
                let pp = prev.add_scaled(&SparseVector::one_hot(n, i, eps).unwrap(), 1.0).unwrap();
                let pm = prev.add_scaled(&SparseVector::one_hot(n, i, eps).unwrap(), -1.0).unwrap();
                let fd = (f(alpha, gamma, &pp, &add, &mem) - f(alpha, gamma, &pm, &add, &mem)) / (2.0 * eps);
                assert!(close(fd, g.d_prev_read.get(i)), "dp[{i}]");
                if gamma == 1.0 {
                    let expect = alpha * dot(&add, c.row(i));
                    assert!((g.d_prev_read.get(i) - expect).abs() < 1e-12);
                }
                let _ = p;
            }
            let prior = dm.to_dense();
            for i in 0..n {
                for j in 0..m {
                    let (mut mp, mut mn) = (mem.clone(), mem.clone());
                    mp.set(i, j, mem.get(i, j) + eps);
                    mn.set(i, j, mem.get(i, j) - eps);
                    let fd = (f(alpha, gamma, &prev, &add, &mp) - f(alpha, gamma, &prev, &add, &mn)) / (2.0 * eps);
                    assert!(close(fd, prior.get(i, j)), "dM0[{i},{j}]");
                }
            }
        }
    }

    /// One head, one step: write from the previous read, then read. Loss is
    /// `c·r_t`. Every exposed input is checked by central differences.
    #[test]
    fn full_step_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, m, k) = (16, 6, 4);
        let eps = 1e-5;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-4);
        let mem = random_memory(&mut rng, n, m);
        let q0 = rand_vec(&mut rng, m);
        let q1 = rand_vec(&mut rng, m);
        let add = rand_vec(&mut rng, m);
        let c = rand_vec(&mut rng, m);
        // x = [α, γ, β0, β1, q0.., q1.., add..]
        let mut x = vec![0.6, 0.4, 2.0, 3.0];
        x.extend(&q0);
        x.extend(&q1);
        x.extend(&add);
        let run = |x: &[f64]| -> (f64, Vec<usize>, Vec<usize>) {
            let cfg = config(n, m, k, 1);
            let mut s = MemoryState::with_memory(cfg, mem.clone()).unwrap();
            let r0 = s.read(&x[4..4 + m], x[2]).unwrap();
            let h = HeadWrite::new(x[0], x[1], r0.weights().clone(), s.lru_indicator(), x[4 + 2 * m..].to_vec())
                .unwrap();
            s.apply_write(vec![h]).unwrap();
            let r1 = s.read(&x[4 + m..4 + 2 * m], x[3]).unwrap();
            (dot(&r1.word, &c), r0.address.slots, r1.address.slots)
        };
        let cfg = config(n, m, k, 1);
        let mut s = MemoryState::with_memory(cfg, mem.clone()).unwrap();
        let r0 = s.read(&q0, x[2]).unwrap();
        let h = HeadWrite::new(x[0], x[1], r0.weights().clone(), s.lru_indicator(), add.clone()).unwrap();
        let mut e = s.apply_write(vec![h]).unwrap();
        let r1 = s.read(&q1, x[3]).unwrap();
        let mut dm = s.zero_grad();
        let g1 = s.read_backward(&r1, &c, None, &mut dm).unwrap();
        s.revert_write(&mut e).unwrap();
        let gw = e.backward(&mut dm).unwrap().remove(0);
        let g0 = s.read_backward(&r0, &[0.0; 6], Some(&gw.d_prev_read), &mut dm).unwrap();
        let mut analytic = vec![gw.d_alpha, gw.d_gamma, g0.d_beta, g1.d_beta];
        analytic.extend(&g0.d_query);
        analytic.extend(&g1.d_query);
        analytic.extend(&gw.d_add);
        let (_, s0, s1) = run(&x);
        let mut checked = 0;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += eps;
            xm[i] -= eps;
            let (lp, a0, a1) = run(&xp);
            let (lm, b0, b1) = run(&xm);
            if a0 != s0 || b0 != s0 || a1 != s1 || b1 != s1 {
                continue;
            }
            let fd = (lp - lm) / (2.0 * eps);
            assert!(close(fd, analytic[i]), "x[{i}] fd {fd} analytic {}", analytic[i]);
            checked += 1;
        }
        assert!(checked >= x.len() - 2);
    }

    #[test]
    fn journal_bytes_do_not_depend_on_slot_count() {
        let sizes: Vec<Vec<usize>> = [64usize, 256, 1024]
            .iter()
            .map(|&n| {
                let mut rng = ChaCha8Rng::seed_from_u64(12);
                let mut s = MemoryState::new(config(n, 8, 4, 2)).unwrap();
                let mut prev = empty_reads(n, 2);
                (0..30).map(|_| random_step(&mut s, &mut rng, &mut prev).bytes()).collect()
            })
            .collect();
        assert_eq!(sizes[0], sizes[1]);
        assert_eq!(sizes[1], sizes[2]);
    }

    proptest! {
        #[test]
        fn writes_stay_sparse_and_usage_bounded(seed in 0u64..500, heads in 1usize..4, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 20;
            let cfg = MemoryConfig { slots: n, word_size: 3, k, heads, ..MemoryConfig::default() };
            let mut s = MemoryState::new(cfg).unwrap();
            let mut prev = empty_reads(n, heads);
            for _ in 0..15 {
                let e = random_step(&mut s, &mut rng, &mut prev);
                for h in e.heads() {
                    prop_assert!(h.weights.nnz() <= k + 1);
                }
                if let Usage::Lru { last_access, ring } = s.usage() {
                    prop_assert!(last_access.iter().all(|&a| a <= s.step()));
                    prop_assert!(ring.is_consistent());
                }
            }
        }
    }
}
