//! Online nearest-neighbour index over memory rows.
//!
//! The index is a structured view of the memory: it owns a copy of every
//! indexed row (unit-normalised under the cosine metric) plus a
//! backend-specific search structure. Every mutation returns an
//! [`AnnChange`] token; passing tokens back to [`AnnIndex::undo`] in reverse
//! order restores the index exactly, including structures replaced by a
//! periodic rebuild.

mod exact;
mod kdforest;
mod lsh;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::la::{dot, norm, DenseMatrix};

pub use kdforest::KdForest;
pub use lsh::LshTables;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Exact,
    KdForest,
    Lsh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnConfig {
    pub backend: Backend,
    pub metric: Metric,
    pub kd_trees: usize,
    pub kd_checks: usize,
    /// Maximum bucket size when a tree is (re)built.
    pub kd_leaf_size: usize,
    pub lsh_tables: usize,
    pub lsh_bits: usize,
    /// `None` means one rebuild per `N` insertions.
    pub rebuild_interval: Option<usize>,
    pub seed: u64,
}

impl Default for AnnConfig {
    fn default() -> Self {
        AnnConfig {
            backend: Backend::Exact,
            metric: Metric::Cosine,
            kd_trees: 4,
            kd_checks: 32,
            kd_leaf_size: 4,
            lsh_tables: 8,
            lsh_bits: 16,
            rebuild_interval: None,
            seed: 0x5A11_0C8E,
        }
    }
}

impl AnnConfig {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn kd_forest(trees: usize, checks: usize) -> Self {
        AnnConfig {
            backend: Backend::KdForest,
            kd_trees: trees,
            kd_checks: checks,
            ..Self::default()
        }
    }

    pub fn lsh(tables: usize, bits: usize) -> Self {
        AnnConfig {
            backend: Backend::Lsh,
            lsh_tables: tables,
            lsh_bits: bits,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backend == Backend::KdForest {
            if self.kd_trees == 0 {
                return Err(Error::config("kd_trees", "must be at least 1"));
            }
            if self.kd_checks == 0 {
                return Err(Error::config("kd_checks", "must be at least 1"));
            }
            if self.kd_leaf_size == 0 {
                return Err(Error::config("kd_leaf_size", "must be at least 1"));
            }
        }
        if self.backend == Backend::Lsh {
            if self.metric != Metric::Cosine {
                return Err(Error::config(
                    "metric",
                    "lsh backend requires the cosine metric",
                ));
            }
            if self.lsh_tables == 0 || self.lsh_bits == 0 || self.lsh_bits > 64 {
                return Err(Error::config("lsh_bits", "tables ≥ 1 and 1 ≤ bits ≤ 64"));
            }
        }
        if self.rebuild_interval == Some(0) {
            return Err(Error::config("rebuild_interval", "must be at least 1"));
        }
        Ok(())
    }
}

/// Flat storage of indexed vectors, addressed by slot.
#[derive(Debug, Clone)]
pub(crate) struct VectorStore {
    dim: usize,
    data: Vec<f64>,
    live: Vec<bool>,
    live_count: usize,
}

impl VectorStore {
    fn new(slots: usize, dim: usize) -> Self {
        VectorStore {
            dim,
            data: vec![0.0; slots * dim],
            live: vec![false; slots],
            live_count: 0,
        }
    }

    #[inline]
    pub(crate) fn get(&self, slot: usize) -> &[f64] {
        &self.data[slot * self.dim..(slot + 1) * self.dim]
    }

    #[inline]
    pub(crate) fn is_live(&self, slot: usize) -> bool {
        self.live[slot]
    }

    pub(crate) fn live_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.live
            .iter()
            .enumerate()
            .filter(|(_, l)| **l)
            .map(|(i, _)| i)
    }

    fn put(&mut self, slot: usize, v: &[f64]) {
        self.data[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(v);
        if !self.live[slot] {
            self.live[slot] = true;
            self.live_count += 1;
        }
    }

    fn clear(&mut self, slot: usize) {
        if self.live[slot] {
            self.live[slot] = false;
            self.live_count -= 1;
            self.data[slot * self.dim..(slot + 1) * self.dim].fill(0.0);
        }
    }
}

#[derive(Debug, Clone)]
enum Structure {
    Exact,
    Kd(KdForest),
    Lsh(LshTables),
}

impl Structure {
    fn build(config: &AnnConfig, store: &VectorStore, generation: u64) -> Structure {
        match config.backend {
            Backend::Exact => Structure::Exact,
            Backend::KdForest => Structure::Kd(KdForest::build(config, store, generation)),
            Backend::Lsh => Structure::Lsh(LshTables::build(config, store)),
        }
    }

    fn insert(&mut self, slot: usize, v: &[f64]) {
        match self {
            Structure::Exact => {}
            Structure::Kd(f) => f.insert(slot, v),
            Structure::Lsh(t) => t.insert(slot, v),
        }
    }

    fn remove(&mut self, slot: usize, v: &[f64]) {
        match self {
            Structure::Exact => {}
            Structure::Kd(f) => f.remove(slot),
            Structure::Lsh(t) => t.remove(slot, v),
        }
    }

    fn payload_bytes(&self) -> usize {
        match self {
            Structure::Exact => 0,
            Structure::Kd(f) => f.payload_bytes(),
            Structure::Lsh(t) => t.payload_bytes(),
        }
    }
}

/// Undo token for a single index mutation.
#[derive(Debug)]
pub struct AnnChange {
    slot: usize,
    kind: ChangeKind,
    counter_before: usize,
    retired: Option<Box<Structure>>,
}

#[derive(Debug)]
enum ChangeKind {
    Inserted,
    Removed(Vec<f64>),
}

impl AnnChange {
    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn is_insert(&self) -> bool {
        matches!(self.kind, ChangeKind::Inserted)
    }

    pub fn triggered_rebuild(&self) -> bool {
        self.retired.is_some()
    }

    /// Bytes held by this token, including any retired structure.
    pub fn bytes(&self) -> usize {
        let base = std::mem::size_of::<AnnChange>();
        let vec = match &self.kind {
            ChangeKind::Inserted => 0,
            ChangeKind::Removed(v) => v.len() * 8,
        };
        base + vec + self.retired.as_ref().map_or(0, |s| s.payload_bytes())
    }
}

/// A nearest-neighbour index over `N` slots of fixed word size.
#[derive(Debug, Clone)]
pub struct AnnIndex {
    config: AnnConfig,
    store: VectorStore,
    structure: Structure,
    insertions_since_rebuild: usize,
    rebuilds: u64,
}

impl AnnIndex {
    /// An index over `slots` slots holding nothing yet.
    pub fn empty(slots: usize, dim: usize, config: AnnConfig) -> Result<Self> {
        config.validate()?;
        if slots == 0 {
            return Err(Error::config("slots", "index needs at least one slot"));
        }
        let store = VectorStore::new(slots, dim);
        let structure = Structure::build(&config, &store, 0);
        Ok(AnnIndex {
            config,
            store,
            structure,
            insertions_since_rebuild: 0,
            rebuilds: 0,
        })
    }

    /// Indexes every row of `rows`. Zero rows are skipped under the cosine
    /// metric since they have no direction.
    pub fn build(rows: &DenseMatrix, config: AnnConfig) -> Result<Self> {
        if rows.rows() == 0 {
            return Err(Error::Contract("cannot index an empty matrix".into()));
        }
        config.validate()?;
        let mut store = VectorStore::new(rows.rows(), rows.cols());
        for i in 0..rows.rows() {
            if let Some(v) = stored_form(config.metric, rows.row(i)) {
                store.put(i, &v);
            }
        }
        let structure = Structure::build(&config, &store, 0);
        Ok(AnnIndex {
            config,
            store,
            structure,
            insertions_since_rebuild: 0,
            rebuilds: 0,
        })
    }

    pub fn config(&self) -> &AnnConfig {
        &self.config
    }

    pub fn slots(&self) -> usize {
        self.store.live.len()
    }

    pub fn dim(&self) -> usize {
        self.store.dim
    }

    pub fn len(&self) -> usize {
        self.store.live_count
    }

    pub fn is_empty(&self) -> bool {
        self.store.live_count == 0
    }

    pub fn contains(&self, slot: usize) -> bool {
        slot < self.slots() && self.store.is_live(slot)
    }

    pub fn rebuild_count(&self) -> u64 {
        self.rebuilds
    }

    pub fn insertions_since_rebuild(&self) -> usize {
        self.insertions_since_rebuild
    }

    pub fn rebuild_interval(&self) -> usize {
        self.config.rebuild_interval.unwrap_or(self.slots())
    }

    /// Up to `k` `(slot, similarity)` pairs, best first; ties break on the
    /// lower slot. Similarity is cosine similarity or negated Euclidean
    /// distance depending on the metric.
    pub fn query(&self, q: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        check_dim("AnnIndex::query", self.dim(), q.len())?;
        if k == 0 {
            return Err(Error::Contract("query needs k ≥ 1".into()));
        }
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let q = match self.config.metric {
            Metric::Cosine => {
                let n = norm(q);
                if n > 0.0 {
                    q.iter().map(|x| x / n).collect()
                } else {
                    q.to_vec()
                }
            }
            Metric::Euclidean => q.to_vec(),
        };
        let scorer = Scorer {
            metric: self.config.metric,
            store: &self.store,
        };
        Ok(match &self.structure {
            Structure::Exact => exact::query(&scorer, &q, k),
            Structure::Kd(f) => f.query(&scorer, &q, k, self.config.kd_checks),
            Structure::Lsh(t) => t.query(&scorer, &q, k),
        })
    }

    /// Adds `v` at `slot`. May trigger a full rebuild.
    pub fn insert(&mut self, slot: usize, v: &[f64]) -> Result<AnnChange> {
        check_dim("AnnIndex::insert", self.dim(), v.len())?;
        if slot >= self.slots() {
            return Err(Error::IndexOutOfRange {
                context: "AnnIndex slot",
                index: slot,
                len: self.slots(),
            });
        }
        if self.store.is_live(slot) {
            return Err(Error::Contract(format!("slot {slot} is already indexed")));
        }
        let stored = stored_form(self.config.metric, v)
            .ok_or_else(|| Error::Contract("cannot index a zero vector under cosine".into()))?;
        let counter_before = self.insertions_since_rebuild;
        self.store.put(slot, &stored);
        self.structure.insert(slot, &stored);
        self.insertions_since_rebuild += 1;
        let mut retired = None;
        if self.insertions_since_rebuild >= self.rebuild_interval() {
            let fresh = Structure::build(&self.config, &self.store, self.rebuilds + 1);
            retired = Some(Box::new(std::mem::replace(&mut self.structure, fresh)));
            self.rebuilds += 1;
            self.insertions_since_rebuild = 0;
        }
        Ok(AnnChange {
            slot,
            kind: ChangeKind::Inserted,
            counter_before,
            retired,
        })
    }

    /// Removes `slot`; a slot that is not indexed is a no-op.
    pub fn remove(&mut self, slot: usize) -> Option<AnnChange> {
        if slot >= self.slots() || !self.store.is_live(slot) {
            return None;
        }
        let old = self.store.get(slot).to_vec();
        self.structure.remove(slot, &old);
        self.store.clear(slot);
        Some(AnnChange {
            slot,
            kind: ChangeKind::Removed(old),
            counter_before: self.insertions_since_rebuild,
            retired: None,
        })
    }

    /// Reverts a change. Changes must be undone newest first.
    pub fn undo(&mut self, change: AnnChange) -> Result<()> {
        let AnnChange {
            slot,
            kind,
            counter_before,
            retired,
        } = change;
        if let Some(old) = retired {
            self.structure = *old;
            self.rebuilds -= 1;
        }
        match kind {
            ChangeKind::Inserted => {
                if !self.store.is_live(slot) {
                    return Err(Error::Contract(format!(
                        "undo of insert at {slot} but slot is not indexed"
                    )));
                }
                let v = self.store.get(slot).to_vec();
                self.structure.remove(slot, &v);
                self.store.clear(slot);
            }
            ChangeKind::Removed(v) => {
                if self.store.is_live(slot) {
                    return Err(Error::Contract(format!(
                        "undo of remove at {slot} but slot is indexed"
                    )));
                }
                self.store.put(slot, &v);
                self.structure.insert(slot, &v);
            }
        }
        self.insertions_since_rebuild = counter_before;
        Ok(())
    }

    /// Feeds the indexed vectors, counters and search structure into `h`.
    pub fn hash_into<H: std::hash::Hasher>(&self, h: &mut H) {
        h.write_usize(self.store.live_count);
        for (i, &l) in self.store.live.iter().enumerate() {
            if l {
                h.write_usize(i);
                for x in self.store.get(i) {
                    h.write_u64(x.to_bits());
                }
            }
        }
        h.write_u64(self.rebuilds);
        h.write_usize(self.insertions_since_rebuild);
        match &self.structure {
            Structure::Exact => h.write_u8(0),
            Structure::Kd(f) => {
                h.write_u8(1);
                f.hash_into(h);
            }
            Structure::Lsh(t) => {
                h.write_u8(2);
                t.hash_into(h);
            }
        }
    }

    /// Rebuilds the search structure from the currently indexed vectors.
    pub fn rebuild(&mut self) {
        self.rebuilds += 1;
        self.structure = Structure::build(&self.config, &self.store, self.rebuilds);
        self.insertions_since_rebuild = 0;
    }
}

fn stored_form(metric: Metric, v: &[f64]) -> Option<Vec<f64>> {
    match metric {
        Metric::Euclidean => Some(v.to_vec()),
        Metric::Cosine => {
            let n = norm(v);
            if n > 0.0 && n.is_finite() {
                Some(v.iter().map(|x| x / n).collect())
            } else {
                None
            }
        }
    }
}

pub(crate) struct Scorer<'a> {
    metric: Metric,
    store: &'a VectorStore,
}

impl Scorer<'_> {
    #[inline]
    pub(crate) fn score(&self, q: &[f64], slot: usize) -> f64 {
        let v = self.store.get(slot);
        match self.metric {
            Metric::Cosine => dot(q, v),
            Metric::Euclidean => -sq_dist(q, v).sqrt(),
        }
    }

    pub(crate) fn store(&self) -> &VectorStore {
        self.store
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Best-first bounded result list.
pub(crate) struct TopK {
    k: usize,
    items: Vec<(usize, f64)>,
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        TopK {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn better(a: (usize, f64), b: (usize, f64)) -> bool {
        a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
    }

    #[inline]
    pub(crate) fn is_full(&self) -> bool {
        self.items.len() >= self.k
    }

    /// Worst retained score, or -inf when not full.
    #[inline]
    pub(crate) fn worst(&self) -> f64 {
        if self.is_full() {
            self.items[self.items.len() - 1].1
        } else {
            f64::NEG_INFINITY
        }
    }

    pub(crate) fn push(&mut self, slot: usize, score: f64) {
        let cand = (slot, score);
        if self.is_full() && !Self::better(cand, self.items[self.items.len() - 1]) {
            return;
        }
        let pos = self
            .items
            .iter()
            .position(|&it| Self::better(cand, it))
            .unwrap_or(self.items.len());
        self.items.insert(pos, cand);
        self.items.truncate(self.k);
    }

    pub(crate) fn into_vec(self) -> Vec<(usize, f64)> {
        self.items
    }
}

/// Fraction of `truth` slots present in `found`.
pub fn recall(found: &[(usize, f64)], truth: &[(usize, f64)]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let hits = truth
        .iter()
        .filter(|(s, _)| found.iter().any(|(f, _)| f == s))
        .count();
    hits as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    pub(crate) fn unit_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> DenseMatrix {
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let nv = norm(&v);
            data.extend(v.iter().map(|x| x / nv));
        }
        DenseMatrix::from_vec(n, dim, data).unwrap()
    }

    fn brute_force(rows: &DenseMatrix, q: &[f64], k: usize) -> Vec<usize> {
        let qn = norm(q);
        let mut scored: Vec<(usize, f64)> = (0..rows.rows())
            .filter(|&i| norm(rows.row(i)) > 0.0)
            .map(|i| (i, dot(q, rows.row(i)) / (qn * norm(rows.row(i)))))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.into_iter().take(k).map(|(i, _)| i).collect()
    }

    fn all_backends() -> Vec<AnnConfig> {
        vec![AnnConfig::exact(), AnnConfig::kd_forest(4, 32), AnnConfig::lsh(8, 16)]
    }

    #[test]
    fn single_row_answers_everything() {
        let rows = DenseMatrix::from_rows(&[vec![0.3, -0.2, 0.9]]).unwrap();
        for cfg in all_backends() {
            let idx = AnnIndex::build(&rows, cfg).unwrap();
            let got = idx.query(&[1.0, 1.0, 1.0], 3).unwrap();
            assert_eq!(got.len(), 1);
            assert_eq!(got[0].0, 0);
        }
    }

    #[test]
    fn basis_query_finds_matching_axis() {
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..8).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let rows = DenseMatrix::from_rows(&rows).unwrap();
        for cfg in all_backends() {
            let idx = AnnIndex::build(&rows, cfg).unwrap();
            let mut q = vec![0.0; 8];
            q[3] = 1.0;
            assert_eq!(idx.query(&q, 1).unwrap()[0].0, 3);
        }
    }

    #[test]
    fn exact_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let rows = unit_rows(&mut rng, 16, 6);
            let idx = AnnIndex::build(&rows, AnnConfig::exact()).unwrap();
            let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got: Vec<usize> = idx.query(&q, 4).unwrap().iter().map(|x| x.0).collect();
            assert_eq!(got, brute_force(&rows, &q, 4));
        }
    }

    #[test]
    fn stored_row_query_returns_itself_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows = unit_rows(&mut rng, 64, 8);
        let idx = AnnIndex::build(&rows, AnnConfig::exact()).unwrap();
        for i in 0..64 {
            let got = idx.query(rows.row(i), 1).unwrap();
            assert_eq!(got[0].0, i);
        }
    }

    #[test]
    fn k_larger_than_live_returns_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows = unit_rows(&mut rng, 5, 4);
        for cfg in all_backends() {
            let idx = AnnIndex::build(&rows, cfg.clone()).unwrap();
            let got = idx.query(rows.row(0), 10).unwrap();
            if cfg.backend != Backend::Lsh {
                assert_eq!(got.len(), 5, "{:?}", cfg.backend);
            }
            assert!(got.len() <= 5);
        }
    }

    #[test]
    fn empty_index_is_an_error() {
        let idx = AnnIndex::empty(8, 3, AnnConfig::exact()).unwrap();
        assert!(matches!(idx.query(&[1.0, 0.0, 0.0], 2), Err(Error::EmptyIndex)));
    }

    #[test]
    fn lsh_rejects_euclidean() {
        let cfg = AnnConfig {
            metric: Metric::Euclidean,
            ..AnnConfig::lsh(4, 8)
        };
        let rows = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(AnnIndex::build(&rows, cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn insert_then_query_finds_slot() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows = unit_rows(&mut rng, 32, 6);
        for cfg in all_backends() {
            let mut idx = AnnIndex::build(&rows, cfg).unwrap();
            idx.remove(5);
            let v = [0.1, 0.9, -0.3, 0.2, 0.0, 0.4];
            idx.insert(5, &v).unwrap();
            assert_eq!(idx.query(&v, 1).unwrap()[0].0, 5);
        }
    }

    #[test]
    fn insert_remove_round_trip_preserves_answers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows = unit_rows(&mut rng, 40, 8);
        let mut base = rows.clone();
        for j in 0..8 {
            base.set(39, j, 0.0);
        }
        for cfg in all_backends() {
            let mut idx = AnnIndex::build(&base, cfg.clone()).unwrap();
            let queries: Vec<Vec<f64>> = (0..10)
                .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let before: Vec<_> = queries.iter().map(|q| idx.query(q, 4).unwrap()).collect();
            idx.insert(39, rows.row(39)).unwrap();
            idx.remove(39).unwrap();
            let after: Vec<_> = queries.iter().map(|q| idx.query(q, 4).unwrap()).collect();
            assert_eq!(before, after, "{:?}", cfg.backend);
        }
    }

    #[test]
    fn remove_unindexed_is_noop() {
        let mut idx = AnnIndex::empty(4, 2, AnnConfig::exact()).unwrap();
        assert!(idx.remove(2).is_none());
        assert!(idx.remove(99).is_none());
    }

    #[test]
    fn n_insertions_trigger_exactly_one_rebuild() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 64;
        let rows = unit_rows(&mut rng, n, 8);
        for cfg in all_backends() {
            let mut idx = AnnIndex::empty(n, 8, cfg).unwrap();
            for i in 0..n {
                idx.insert(i, rows.row(i)).unwrap();
            }
            assert_eq!(idx.rebuild_count(), 1);
            assert_eq!(idx.insertions_since_rebuild(), 0);
        }
    }

    #[test]
    fn undo_restores_rebuilt_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 32;
        let rows = unit_rows(&mut rng, n, 6);
        let mut idx = AnnIndex::build(&rows, AnnConfig::kd_forest(2, 6)).unwrap();
        let queries: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let before: Vec<_> = queries.iter().map(|q| idx.query(q, 3).unwrap()).collect();
        let mut log = Vec::new();
        for round in 0..3 {
            for i in 0..n {
                log.extend(idx.remove(i));
                let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                log.push(idx.insert(i, &v).unwrap());
            }
            assert_eq!(idx.rebuild_count(), round + 1);
        }
        while let Some(c) = log.pop() {
            idx.undo(c).unwrap();
        }
        assert_eq!(idx.rebuild_count(), 0);
        let after: Vec<_> = queries.iter().map(|q| idx.query(q, 3).unwrap()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn kd_forest_recall_on_clustered_queries() {
        // Queries near stored points: the regime memory reads operate in.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rows = unit_rows(&mut rng, 512, 16);
        let exact = AnnIndex::build(&rows, AnnConfig::exact()).unwrap();
        let kd = AnnIndex::build(&rows, AnnConfig::kd_forest(4, 32)).unwrap();
        let mut hits = 0.0;
        for _ in 0..100 {
            let target = rng.random_range(0..512);
            let q: Vec<f64> = rows
                .row(target)
                .iter()
                .map(|x| x + 0.01 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let truth = exact.query(&q, 1).unwrap();
            hits += recall(&kd.query(&q, 4).unwrap(), &truth);
        }
        assert!(hits / 100.0 >= 0.9, "top-1 recall {}", hits / 100.0);
    }

    #[test]
    fn interleaved_mutations_then_rebuild_keep_exact_answers() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let n = 48;
        let rows = unit_rows(&mut rng, n, 5);
        let mut idx = AnnIndex::build(&rows, AnnConfig::exact()).unwrap();
        for _ in 0..10 * n {
            let s = rng.random_range(0..n);
            if idx.contains(s) && rng.random_bool(0.5) {
                idx.remove(s);
            } else if !idx.contains(s) {
                let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                idx.insert(s, &v).unwrap();
            }
        }
        let queries: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let before: Vec<_> = queries.iter().map(|q| idx.query(q, 4).unwrap()).collect();
        idx.rebuild();
        let after: Vec<_> = queries.iter().map(|q| idx.query(q, 4).unwrap()).collect();
        assert_eq!(before, after);
    }
}
