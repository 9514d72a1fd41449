//! Full memory-augmented models: controller + memory (+ linkage), run over
//! whole episodes with backpropagation through time.
//!
//! The sparse models never checkpoint memory. Forward appends one journal
//! entry per step; backward walks the steps in reverse, computing each
//! step's read gradients at `M_t`, then reverting the write to reach
//! `M_{t−1}` before differentiating through it. At the end of an episode
//! the replica is back in its starting state.

use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::ann::{AnnConfig, Backend};
use crate::controller::{
    sigmoid, Controller, ControllerConfig, HeadInterfaceGrad, Interface, LstmCache, LstmState,
};
use crate::error::{check_dim, Error, Result};
use crate::la::{DenseMatrix, SparseVector};
use crate::linkage::{
    mix_backward, read_mode_mix, DenseLinkage, LinkageConfig, LinkageState, LinkageUndo, ModeMix,
};
use crate::memory::{
    ContentWeights, HeadWrite, MemoryConfig, MemoryGrad, MemoryState, Rollback, UsageMode,
    WriteJournalEntry,
};
use crate::tasks::Episode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Sparse reads and writes, exact top-K search.
    #[serde(alias = "sam")]
    SamExact,
    /// Sparse reads and writes, approximate index.
    SamAnn,
    /// Dense addressing, discounted usage, journaled writes.
    Dam,
    /// Dense addressing with a full memory copy per step.
    NtmDense,
    /// SAM plus sparse temporal linkage.
    Sdnc,
    /// Dense addressing plus a dense `N × N` link matrix.
    DncDense,
    /// Controller only.
    #[serde(alias = "lstm-only")]
    Lstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::SamExact,
        ModelKind::SamAnn,
        ModelKind::Dam,
        ModelKind::NtmDense,
        ModelKind::Sdnc,
        ModelKind::DncDense,
        ModelKind::Lstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SamExact => "sam-exact",
            ModelKind::SamAnn => "sam-ann",
            ModelKind::Dam => "dam",
            ModelKind::NtmDense => "ntm-dense",
            ModelKind::Sdnc => "sdnc",
            ModelKind::DncDense => "dnc-dense",
            ModelKind::Lstm => "lstm",
        }
    }

    /// Accepts the canonical names plus `sam` (= `sam-exact`).
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sam" => Some(ModelKind::SamExact),
            "lstm-only" => Some(ModelKind::Lstm),
            _ => Self::ALL.into_iter().find(|k| k.name() == s),
        }
    }

    pub fn has_memory(self) -> bool {
        self != ModelKind::Lstm
    }

    /// Dense addressing: every step touches all `N` slots.
    pub fn is_dense(self) -> bool {
        matches!(self, ModelKind::Dam | ModelKind::NtmDense | ModelKind::DncDense)
    }

    pub fn has_linkage(self) -> bool {
        matches!(self, ModelKind::Sdnc | ModelKind::DncDense)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input_size: usize,
    pub output_size: usize,
    pub hidden: usize,
    pub slots: usize,
    pub word_size: usize,
    pub heads: usize,
    pub k: usize,
    pub delta: f64,
    pub lambda: f64,
    /// Index used by `sam-ann` and `sdnc`; the other kinds ignore it.
    pub ann: AnnConfig,
    pub k_l: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let mem = MemoryConfig::default();
        ModelConfig {
            kind: ModelKind::SamExact,
            input_size: 9,
            output_size: 8,
            hidden: 100,
            slots: mem.slots,
            word_size: mem.word_size,
            heads: mem.heads,
            k: mem.k,
            delta: mem.delta,
            lambda: mem.lambda,
            ann: AnnConfig::kd_forest(4, 32),
            k_l: LinkageConfig::default().k_l,
        }
    }
}

impl ModelConfig {
    /// Memory settings implied by the model kind, or `None` for `lstm`.
    pub fn memory_config(&self) -> Option<MemoryConfig> {
        let kind = self.kind;
        if !kind.has_memory() {
            return None;
        }
        let ann = match kind {
            ModelKind::SamAnn | ModelKind::Sdnc => self.ann.clone(),
            _ => AnnConfig {
                seed: self.ann.seed,
                ..AnnConfig::exact()
            },
        };
        Some(MemoryConfig {
            slots: self.slots,
            word_size: self.word_size,
            k: self.k,
            heads: self.heads,
            usage: if kind.is_dense() {
                UsageMode::Discounted
            } else {
                UsageMode::Lru
            },
            delta: self.delta,
            lambda: self.lambda,
            dense: kind.is_dense(),
            rollback: if kind == ModelKind::NtmDense {
                Rollback::Checkpoint
            } else {
                Rollback::Journal
            },
            ann,
        })
    }

    pub fn controller_config(&self) -> ControllerConfig {
        let memory = self.kind.has_memory();
        ControllerConfig {
            input_size: self.input_size,
            output_size: self.output_size,
            hidden: self.hidden,
            heads: if memory { self.heads } else { 0 },
            word_size: if memory { self.word_size } else { 0 },
            read_modes: self.kind.has_linkage(),
        }
    }

    pub fn linkage_config(&self) -> LinkageConfig {
        LinkageConfig {
            k_l: self.k_l,
            k: self.k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ModelKind::SamAnn && self.ann.backend == Backend::Exact {
            return Err(Error::config("ann", "sam-ann needs an approximate backend"));
        }
        if let Some(m) = self.memory_config() {
            m.validate()?;
        }
        if self.kind == ModelKind::Sdnc {
            self.linkage_config().validate()?;
        }
        self.controller_config().validate()
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Linkage {
    None,
    Sparse(LinkageState),
    Dense(DenseLinkage),
}

/// Per-worker mutable state: memory, usage, index and linkage.
#[derive(Debug, Clone)]
pub struct Replica {
    memory: Option<MemoryState>,
    linkage: Linkage,
}

impl Replica {
    pub fn memory(&self) -> Option<&MemoryState> {
        self.memory.as_ref()
    }

    pub fn sparse_linkage(&self) -> Option<&LinkageState> {
        match &self.linkage {
            Linkage::Sparse(l) => Some(l),
            _ => None,
        }
    }

    /// Hash over every piece of mutable state. Costs `O(N·M)`.
    pub fn state_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        if let Some(m) = &self.memory {
            h.write_u64(m.state_hash());
        }
        match &self.linkage {
            Linkage::None => {}
            Linkage::Sparse(l) => l.hash_into(&mut h),
            Linkage::Dense(l) => l.hash_into(&mut h),
        }
        h.finish()
    }
}

/// Result of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeOutput {
    /// Sigmoid cross-entropy summed over output bits, averaged over answer
    /// steps, in nats.
    pub loss: f64,
    /// Output probabilities, `T × output_size`.
    pub outputs: Vec<f64>,
    /// Parameter gradient; empty when only the forward pass ran.
    pub grads: Vec<f64>,
    /// Gradient with respect to the memory at episode start.
    pub d_memory: Option<MemoryGrad>,
    /// Bytes held by the rollback journal at the end of the forward pass.
    pub journal_bytes: usize,
    /// Hash of every discrete choice made in the forward pass: LRU slots,
    /// retained neighbours, truncated weightings.
    pub signature: u64,
    /// Forward and backward link weightings per step and head (`t·heads + k`);
    /// empty for models without linkage.
    pub directional: Vec<(SparseVector, SparseVector)>,
}

impl EpisodeOutput {
    pub fn bits_per_step(&self) -> f64 {
        self.loss / std::f64::consts::LN_2
    }
}

/// What a step observer sees once a step's reads are complete.
pub struct StepView<'a> {
    pub step: usize,
    pub memory: Option<&'a MemoryState>,
    pub writes: &'a [HeadWrite],
    pub interface: &'a Interface,
    pub content: Vec<&'a ContentWeights>,
    pub read_weights: Vec<&'a SparseVector>,
    pub logits: &'a [f64],
}

#[derive(Debug)]
struct HeadRead {
    content: ContentWeights,
    f: SparseVector,
    b: SparseVector,
    mix: Option<ModeMix>,
}

impl HeadRead {
    fn weights(&self) -> &SparseVector {
        match &self.mix {
            Some(m) => &m.weights,
            None => &self.content.weights,
        }
    }
}

#[derive(Debug)]
struct StepCache {
    lstm: LstmCache,
    h: Vec<f64>,
    iface: Interface,
    entry: Option<WriteJournalEntry>,
    link: Option<LinkageUndo>,
    reads: Vec<HeadRead>,
    r: Vec<f64>,
}

struct Tape {
    steps: Vec<StepCache>,
    dense_start: Option<DenseLinkage>,
    d_logits: Vec<f64>,
    outputs: Vec<f64>,
    loss: f64,
    signature: std::collections::hash_map::DefaultHasher,
    directional: Vec<(SparseVector, SparseVector)>,
}

/// A model definition. Parameters live outside so workers can share them.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    controller: Controller,
    memory: Option<MemoryConfig>,
    verify_rollback: bool,
    replay_writes: bool,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let controller = Controller::new(config.controller_config())?;
        let memory = config.memory_config();
        Ok(Model {
            config,
            controller,
            memory,
            verify_rollback: cfg!(debug_assertions),
            replay_writes: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn num_params(&self) -> usize {
        self.controller.num_params()
    }

    pub fn init_params<R: rand::Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.controller.init_params(rng)
    }

    /// Compare full state hashes before and after every episode. On by
    /// default in debug builds; costs `O(N·M)` per episode.
    pub fn set_verify_rollback(&mut self, on: bool) {
        self.verify_rollback = on;
    }

    /// After a training episode's backward pass, re-apply its writes so the
    /// replica ends at the final state instead of the start state. Costs
    /// O(T) sparse updates.
    pub fn set_replay_writes(&mut self, on: bool) {
        self.replay_writes = on;
    }

    /// A replica with zeroed memory and empty linkage.
    pub fn new_replica(&self) -> Result<Replica> {
        match &self.memory {
            None => Ok(Replica {
                memory: None,
                linkage: Linkage::None,
            }),
            Some(cfg) => {
                self.replica_with_memory(DenseMatrix::zeros(cfg.slots, cfg.word_size))
            }
        }
    }

    /// A replica whose memory starts from `memory`.
    pub fn replica_with_memory(&self, memory: DenseMatrix) -> Result<Replica> {
        let Some(cfg) = &self.memory else {
            return Err(Error::Contract("lstm model has no memory".into()));
        };
        let state = MemoryState::with_memory(cfg.clone(), memory)?;
        let linkage = match self.config.kind {
            ModelKind::Sdnc => Linkage::Sparse(LinkageState::new(
                cfg.slots,
                self.config.linkage_config(),
            )?),
            ModelKind::DncDense => Linkage::Dense(DenseLinkage::new(cfg.slots)),
            _ => Linkage::None,
        };
        Ok(Replica {
            memory: Some(state),
            linkage,
        })
    }

    fn check_episode(&self, ep: &Episode) -> Result<()> {
        check_dim("episode input width", self.config.input_size, ep.input_width)?;
        check_dim("episode output width", self.config.output_size, ep.output_width)?;
        check_dim("episode mask", ep.steps, ep.mask.len())?;
        if ep.mask.iter().any(|&m| !(m >= 0.0 && m.is_finite())) {
            return Err(Error::Contract("mask weights must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    /// Forward and backward over the whole episode. The replica ends in the
    /// state it started from.
    pub fn run_episode(
        &self,
        params: &[f64],
        replica: &mut Replica,
        ep: &Episode,
    ) -> Result<EpisodeOutput> {
        self.run(params, replica, ep, true, None, None)
    }

    /// Forward only, then rollback. Parameters are not touched.
    pub fn evaluate(&self, params: &[f64], replica: &mut Replica, ep: &Episode) -> Result<EpisodeOutput> {
        self.run(params, replica, ep, false, None, None)
    }

    /// Forward only, with the link weightings replaced by `directional`
    /// (as returned in [`EpisodeOutput::directional`]). Since no gradient
    /// flows through the linkage, finite differences of this function are
    /// what the analytic gradient of a linkage model should match.
    pub fn evaluate_frozen_links(
        &self,
        params: &[f64],
        replica: &mut Replica,
        ep: &Episode,
        directional: &[(SparseVector, SparseVector)],
    ) -> Result<EpisodeOutput> {
        self.run(params, replica, ep, false, None, Some(directional))
    }

    /// Like [`Model::run_episode`], calling `observer` after each forward step.
    pub fn run_episode_observed(
        &self,
        params: &[f64],
        replica: &mut Replica,
        ep: &Episode,
        observer: &mut dyn FnMut(&StepView),
    ) -> Result<EpisodeOutput> {
        self.run(params, replica, ep, true, Some(observer), None)
    }

    fn run(
        &self,
        params: &[f64],
        replica: &mut Replica,
        ep: &Episode,
        backward: bool,
        observer: Option<&mut dyn FnMut(&StepView)>,
        frozen: Option<&[(SparseVector, SparseVector)]>,
    ) -> Result<EpisodeOutput> {
        self.check_episode(ep)?;
        if let Some(f) = frozen {
            if matches!(replica.linkage, Linkage::None) {
                return Err(Error::Contract("frozen link weightings for a model without linkage".into()));
            }
            check_dim("frozen link weightings", ep.steps * self.controller.config().heads, f.len())?;
        }
        check_dim("params", self.num_params(), params.len())?;
        let start_hash = self.verify_rollback.then(|| replica.state_hash());
        let mut tape = Tape {
            steps: Vec::with_capacity(ep.steps),
            dense_start: match &replica.linkage {
                Linkage::Dense(d) => Some(d.clone()),
                _ => None,
            },
            d_logits: vec![0.0; ep.targets.len()],
            outputs: vec![0.0; ep.targets.len()],
            loss: 0.0,
            signature: Default::default(),
            directional: Vec::new(),
        };
        if let Err(e) = self.forward(params, replica, ep, &mut tape, observer, frozen) {
            self.rollback(replica, &mut tape)?;
            return Err(e);
        }
        let journal_bytes = tape_bytes(&tape);
        let replay: Vec<(Vec<HeadWrite>, Vec<SparseVector>)> = if backward && self.replay_writes {
            tape.steps
                .iter()
                .filter_map(|s| {
                    let e = s.entry.as_ref()?;
                    Some((e.heads().to_vec(), s.reads.iter().map(|r| r.weights().clone()).collect()))
                })
                .collect()
        } else {
            Vec::new()
        };
        let (grads, d_memory) = if backward {
            match self.backward(params, replica, &mut tape) {
                Ok(g) => g,
                Err(e) => {
                    self.rollback(replica, &mut tape)?;
                    return Err(e);
                }
            }
        } else {
            self.rollback(replica, &mut tape)?;
            (Vec::new(), None)
        };
        if let Some(h) = start_hash {
            if replica.state_hash() != h {
                return Err(Error::JournalDesync {
                    step: 0,
                    reason: "state after rollback differs from episode start".into(),
                });
            }
        }
        if !replay.is_empty() {
            self.replay(replica, replay)?;
        }
        Ok(EpisodeOutput {
            loss: tape.loss,
            outputs: tape.outputs,
            grads,
            d_memory,
            journal_bytes,
            signature: tape.signature.finish(),
            directional: tape.directional,
        })
    }

    fn forward(
        &self,
        params: &[f64],
        replica: &mut Replica,
        ep: &Episode,
        tape: &mut Tape,
        mut observer: Option<&mut dyn FnMut(&StepView)>,
        frozen: Option<&[(SparseVector, SparseVector)]>,
    ) -> Result<()> {
        let cc = self.controller.config();
        let (heads, m) = (cc.heads, cc.word_size);
        let n = self.memory.as_ref().map_or(0, |c| c.slots);
        let out = cc.output_size;
        let mut lstm = LstmState::zeros(cc.hidden);
        let mut r_prev = vec![0.0; cc.read_size()];
        let mut prev_w: Vec<SparseVector> = vec![SparseVector::new(n); heads];
        let answer_weight: f64 = ep.mask.iter().sum();
        for t in 0..ep.steps {
            let (next, lstm_cache) = self.controller.lstm_step(params, &lstm, ep.input(t), &r_prev)?;
            let iface = self.controller.interface_project(params, &next.h)?;
            tape.steps.push(StepCache {
                lstm: lstm_cache,
                h: next.h.clone(),
                iface,
                entry: None,
                link: None,
                reads: Vec::with_capacity(heads),
                r: Vec::new(),
            });
            lstm = next;
            let cache = tape.steps.last_mut().expect("just pushed");
            if let Some(mem) = replica.memory.as_mut() {
                let lru = mem.lru_slots(heads);
                lru.hash(&mut tape.signature);
                let mut writes = Vec::with_capacity(heads);
                for (k, hi) in cache.iface.heads.iter().enumerate() {
                    writes.push(HeadWrite::new(
                        hi.alpha,
                        hi.gamma,
                        std::mem::replace(&mut prev_w[k], SparseVector::new(n)),
                        lru[k],
                        hi.add.clone(),
                    )?);
                }
                let entry = cache.entry.insert(mem.apply_write(writes)?);
                if !matches!(replica.linkage, Linkage::None) {
                    let mut mean = SparseVector::new(n);
                    for w in entry.heads() {
                        mean = mean.add_scaled(&w.weights, 1.0 / heads as f64)?;
                    }
                    match &mut replica.linkage {
                        Linkage::Sparse(l) => cache.link = Some(l.update(&mean)?),
                        Linkage::Dense(l) => l.update(&mean)?,
                        Linkage::None => {}
                    }
                }
                let mut r = Vec::with_capacity(heads * m);
                for (k, hi) in cache.iface.heads.iter().enumerate() {
                    let content = mem.content_weights(&hi.query, hi.beta)?;
                    content.slots.hash(&mut tape.signature);
                    let w_prev = &entry.heads()[k].prev_read;
                    let fb = match (&replica.linkage, frozen) {
                        (Linkage::None, _) => None,
                        (_, Some(fr)) => Some(fr[t * heads + k].clone()),
                        (Linkage::Sparse(l), None) => Some(l.directional_weights(w_prev)?),
                        (Linkage::Dense(l), None) => Some((l.forward(w_prev)?, l.backward(w_prev)?)),
                    };
                    let (f, b, mix) = match fb {
                        None => (SparseVector::new(n), SparseVector::new(n), None),
                        Some((f, b)) => {
                            let k_mix = matches!(replica.linkage, Linkage::Sparse(_)).then_some(self.config.k);
                            let mix = read_mode_mix(&content.weights, &f, &b, hi.modes, k_mix)?;
                            tape.directional.push((f.clone(), b.clone()));
                            (f, b, Some(mix))
                        }
                    };
                    let read = HeadRead { content, f, b, mix };
                    if let Some(mix) = &read.mix {
                        read.f.indices().collect::<Vec<_>>().hash(&mut tape.signature);
                        read.b.indices().collect::<Vec<_>>().hash(&mut tape.signature);
                        mix.weights.indices().collect::<Vec<_>>().hash(&mut tape.signature);
                        (mix.scale == 1.0).hash(&mut tape.signature);
                    }
                    r.extend(mem.read_word(read.weights())?);
                    prev_w[k] = read.weights().clone();
                    cache.reads.push(read);
                }
                let refs: Vec<&SparseVector> = cache.reads.iter().map(HeadRead::weights).collect();
                mem.record_access(entry, &refs)?;
                cache.r = r;
            }
            let y = self.controller.output_combine(params, &cache.h, &cache.r)?;
            let (tg, mask) = (ep.target(t), ep.mask[t]);
            for j in 0..out {
                let p = sigmoid(y[j]);
                tape.outputs[t * out + j] = p;
                if mask > 0.0 {
                    let ce = y[j].max(0.0) - tg[j] * y[j] + (-y[j].abs()).exp().ln_1p();
                    tape.loss += mask * ce / answer_weight;
                    tape.d_logits[t * out + j] = mask * (p - tg[j]) / answer_weight;
                }
            }
            if !tape.loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {}", t + 1)));
            }
            if let Some(obs) = observer.as_deref_mut() {
                let cache = tape.steps.last().expect("just pushed");
                obs(&StepView {
                    step: t + 1,
                    memory: replica.memory.as_ref(),
                    writes: cache.entry.as_ref().map_or(&[], |e| e.heads()),
                    interface: &cache.iface,
                    content: cache.reads.iter().map(|r| &r.content).collect(),
                    read_weights: cache.reads.iter().map(HeadRead::weights).collect(),
                    logits: &y,
                });
            }
            r_prev.clone_from(&tape.steps.last().expect("just pushed").r);
        }
        Ok(())
    }

    /// Re-applies recorded writes, linkage updates and accesses in order.
    fn replay(&self, replica: &mut Replica, steps: Vec<(Vec<HeadWrite>, Vec<SparseVector>)>) -> Result<()> {
        let Some(mem) = replica.memory.as_mut() else {
            return Ok(());
        };
        let n = mem.slots();
        for (writes, reads) in steps {
            let heads = writes.len();
            let mut entry = mem.apply_write(writes)?;
            if !matches!(replica.linkage, Linkage::None) {
                let mut mean = SparseVector::new(n);
                for w in entry.heads() {
                    mean = mean.add_scaled(&w.weights, 1.0 / heads as f64)?;
                }
                match &mut replica.linkage {
                    Linkage::Sparse(l) => {
                        l.update(&mean)?;
                    }
                    Linkage::Dense(l) => l.update(&mean)?,
                    Linkage::None => {}
                }
            }
            let refs: Vec<&SparseVector> = reads.iter().collect();
            mem.record_access(&mut entry, &refs)?;
        }
        Ok(())
    }

    /// Undoes every step still recorded on the tape, newest first.
    fn rollback(&self, replica: &mut Replica, tape: &mut Tape) -> Result<()> {
        while let Some(mut step) = tape.steps.pop() {
            if let (Some(undo), Linkage::Sparse(l)) = (step.link.take(), &mut replica.linkage) {
                l.revert(undo)?;
            }
            if let (Some(entry), Some(mem)) = (step.entry.as_mut(), replica.memory.as_mut()) {
                mem.revert_write(entry)?;
            }
        }
        if let Some(d) = tape.dense_start.take() {
            replica.linkage = Linkage::Dense(d);
        }
        Ok(())
    }

    fn backward(
        &self,
        params: &[f64],
        replica: &mut Replica,
        tape: &mut Tape,
    ) -> Result<(Vec<f64>, Option<MemoryGrad>)> {
        let cc = self.controller.config();
        let (heads, m, hd, out) = (cc.heads, cc.word_size, cc.hidden, cc.output_size);
        let n = self.memory.as_ref().map_or(0, |c| c.slots);
        let mut grads = vec![0.0; self.num_params()];
        let mut d_mem = replica.memory.as_ref().map(MemoryState::zero_grad);
        let mut d_h_next = vec![0.0; hd];
        let mut d_c_next = vec![0.0; hd];
        let mut d_r_next = vec![0.0; cc.read_size()];
        let mut d_prev_read: Vec<SparseVector> = vec![SparseVector::new(n); heads];
        while let Some(mut step) = tape.steps.pop() {
            let t = tape.steps.len();
            let d_y = &tape.d_logits[t * out..(t + 1) * out];
            let (mut d_h, mut d_r) = self.controller.output_backward(params, &step.h, &step.r, d_y, &mut grads)?;
            for (a, b) in d_r.iter_mut().zip(&d_r_next) {
                *a += b;
            }
            if let (Some(mem), Some(dm)) = (replica.memory.as_mut(), d_mem.as_mut()) {
                let mut d_iface = vec![HeadInterfaceGrad::zeros(m); heads];
                for (k, read) in step.reads.iter().enumerate() {
                    let dw = mem
                        .read_word_backward(read.weights(), &d_r[k * m..(k + 1) * m], dm)?
                        .add_scaled(&d_prev_read[k], 1.0)?;
                    let d_content = match &read.mix {
                        Some(mix) => {
                            let modes = step.iface.heads[k].modes;
                            let (d_modes, dc) = mix_backward(mix, &read.content.weights, &read.f, &read.b, modes, &dw)?;
                            d_iface[k].d_modes = d_modes;
                            dc
                        }
                        None => dw,
                    };
                    let (dq, db) = mem.content_backward(&read.content, &d_content, dm)?;
                    d_iface[k].d_query = dq;
                    d_iface[k].d_beta = db;
                }
                if let (Some(undo), Linkage::Sparse(l)) = (step.link.take(), &mut replica.linkage) {
                    l.revert(undo)?;
                }
                let entry = step.entry.as_mut().ok_or_else(|| Error::JournalDesync {
                    step: t as u64 + 1,
                    reason: "missing journal entry".into(),
                })?;
                mem.revert_write(entry)?;
                let wg = entry.backward(dm)?;
                for (k, g) in wg.into_iter().enumerate() {
                    d_iface[k].d_alpha = g.d_alpha;
                    d_iface[k].d_gamma = g.d_gamma;
                    d_iface[k].d_add = g.d_add;
                    d_prev_read[k] = g.d_prev_read;
                }
                let dh_iface = self.controller.interface_backward(params, &step.h, &step.iface, &d_iface, &mut grads)?;
                for (a, b) in d_h.iter_mut().zip(&dh_iface) {
                    *a += b;
                }
            }
            for (a, b) in d_h.iter_mut().zip(&d_h_next) {
                *a += b;
            }
            let lg = self.controller.lstm_backward(params, &step.lstm, &d_h, &d_c_next, &mut grads)?;
            d_r_next = lg.d_r_prev;
            d_h_next = lg.d_h_prev;
            d_c_next = lg.d_c_prev;
            d_r.clear();
        }
        if let Some(d) = tape.dense_start.take() {
            replica.linkage = Linkage::Dense(d);
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        Ok((grads, d_mem))
    }
}

fn tape_bytes(tape: &Tape) -> usize {
    let mut total = tape.dense_start.as_ref().map_or(0, DenseLinkage::bytes);
    for s in &tape.steps {
        total += s.entry.as_ref().map_or(0, WriteJournalEntry::bytes);
        total += s.link.as_ref().map_or(0, LinkageUndo::bytes);
    }
    total
}
