//! Minibatch training loop: serial or hogwild workers, metrics records,
//! checkpoints, and level-sweep evaluation.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::curriculum::{CurriculumConfig, CurriculumState};
use super::optim::{clip_global_norm, shared_update, RmsProp, RmsPropConfig, SharedVec};
use crate::error::{check_dim, Error, Result};
use crate::model::{Model, Replica};
use crate::snapshot::Snapshot;
use crate::tasks::{bit_error, generate, TaskConfig};

/// One record per minibatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub minibatch: u64,
    /// Episodes completed so far.
    pub episode: u64,
    pub level: usize,
    /// Curriculum ceiling when the minibatch was drawn.
    pub h: usize,
    /// Mean loss over the minibatch, bits per answer step.
    pub loss: f64,
    pub grad_norm: f64,
    /// Mean rollback journal size per episode.
    pub journal_bytes: f64,
    pub wall_ms: f64,
}

/// SplitMix64 finaliser over three words.
pub fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a
        .wrapping_add(b.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(c.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const PARAM_STREAM: u64 = u64::MAX;
const LEVEL_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    Budget,
}

struct BatchResult {
    loss_bits: f64,
    grads: Vec<f64>,
    journal_bytes: f64,
}

fn run_minibatch(
    model: &Model,
    cfg: &TrainConfig,
    params: &[f64],
    replica: &mut Replica,
    batch: u64,
    level: usize,
) -> Result<BatchResult> {
    let mut grads = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut bytes = 0.0;
    let mb = cfg.minibatch as f64;
    for j in 0..cfg.minibatch {
        let ep = generate(&cfg.task_config(level, mix_seed(cfg.seed, batch, j as u64)))?;
        let out = model.run_episode(params, replica, &ep)?;
        for (g, d) in grads.iter_mut().zip(&out.grads) {
            *g += d / mb;
        }
        loss += out.bits_per_step() / mb;
        bytes += out.journal_bytes as f64 / mb;
    }
    Ok(BatchResult {
        loss_bits: loss,
        grads,
        journal_bytes: bytes,
    })
}

#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    model: Model,
    params: Vec<f64>,
    opt: RmsProp,
    curriculum: CurriculumState,
    recent: VecDeque<f64>,
    done: u64,
    replica: Replica,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config())?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, PARAM_STREAM, 0));
        let params = model.init_params(&mut rng);
        let opt = RmsProp::new(rms_config(&config), params.len());
        let curriculum = CurriculumState::new(curriculum_config(&config));
        let replica = model.new_replica()?;
        Ok(Trainer {
            config,
            model,
            params,
            opt,
            curriculum,
            recent: VecDeque::new(),
            done: 0,
            replica,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn optimizer(&self) -> &RmsProp {
        &self.opt
    }

    pub fn curriculum(&self) -> &CurriculumState {
        &self.curriculum
    }

    pub fn minibatches_done(&self) -> u64 {
        self.done
    }

    /// Mean loss over the stop window, once the window is full.
    pub fn recent_loss(&self) -> Option<f64> {
        (self.recent.len() == self.config.stop_window)
            .then(|| self.recent.iter().sum::<f64>() / self.recent.len() as f64)
    }

    pub fn converged(&self) -> bool {
        match (self.config.stop_bits, self.recent_loss()) {
            (Some(target), Some(l)) => l < target,
            _ => false,
        }
    }

    fn level_for(cfg: &TrainConfig, cur: &CurriculumState, batch: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, batch, LEVEL_STREAM));
        if cfg.curriculum {
            cur.sample(&mut rng).max(1)
        } else {
            rng.random_range(cfg.min_level..=cfg.max_level)
        }
    }

    fn record(&mut self, loss_bits: f64) {
        if self.config.curriculum {
            self.curriculum.observe(loss_bits);
        }
        if self.recent.len() == self.config.stop_window {
            self.recent.pop_front();
        }
        self.recent.push_back(loss_bits);
    }

    /// One serial minibatch.
    pub fn step(&mut self) -> Result<Metrics> {
        let t0 = Instant::now();
        let batch = self.done;
        let h = self.curriculum.h;
        let level = Self::level_for(&self.config, &self.curriculum, batch);
        let mut r = run_minibatch(&self.model, &self.config, &self.params, &mut self.replica, batch, level)?;
        let grad_norm = clip_global_norm(&mut r.grads, self.config.clip_norm);
        self.opt.update(&mut self.params, &r.grads)?;
        self.record(r.loss_bits);
        self.done += 1;
        Ok(Metrics {
            minibatch: batch,
            episode: self.done * self.config.minibatch as u64,
            level,
            h,
            loss: r.loss_bits,
            grad_norm,
            journal_bytes: r.journal_bytes,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Trains until the budget is spent or the stop criterion holds.
    /// `checkpoint` is called every `checkpoint_every` minibatches and at
    /// the end.
    pub fn run(
        &mut self,
        sink: &mut dyn FnMut(&Metrics) -> Result<()>,
        checkpoint: &mut dyn FnMut(&Trainer) -> Result<()>,
    ) -> Result<StopReason> {
        let reason = if self.config.hogwild && self.config.workers > 1 {
            self.run_hogwild(sink)?
        } else {
            loop {
                if self.converged() {
                    break StopReason::Converged;
                }
                if self.done >= self.config.minibatches {
                    break StopReason::Budget;
                }
                let m = self.step()?;
                sink(&m)?;
                let every = self.config.checkpoint_every;
                if every > 0 && self.done.is_multiple_of(every) {
                    checkpoint(self)?;
                }
            }
        };
        checkpoint(self)?;
        Ok(reason)
    }

    fn run_hogwild(&mut self, sink: &mut dyn FnMut(&Metrics) -> Result<()>) -> Result<StopReason> {
        let params = SharedVec::new(&self.params);
        let mean_square = SharedVec::new(&self.opt.mean_square);
        let next = AtomicU64::new(self.done);
        let completed = AtomicU64::new(self.done);
        let stop = AtomicBool::new(self.converged());
        let shared = Mutex::new((self.curriculum.clone(), self.recent.clone()));
        let (tx, rx) = mpsc::channel::<Result<Metrics>>();
        let cfg = &self.config;
        let model = &self.model;
        let rms = self.opt.config;
        let velocity0 = self.opt.velocity.clone();
        let mut first_error = None;
        std::thread::scope(|scope| {
            for _ in 0..cfg.workers {
                let tx = tx.clone();
                let (params, mean_square, next, completed, stop, shared) =
                    (&params, &mean_square, &next, &completed, &stop, &shared);
                let mut velocity = velocity0.clone();
                scope.spawn(move || {
                    let mut work = || -> Result<()> {
                        let mut replica = model.new_replica()?;
                        loop {
                            if stop.load(Ordering::Relaxed) {
                                return Ok(());
                            }
                            let batch = next.fetch_add(1, Ordering::Relaxed);
                            if batch >= cfg.minibatches {
                                return Ok(());
                            }
                            let t0 = Instant::now();
                            let (level, h) = {
                                let g = shared.lock().expect("curriculum lock");
                                (Self::level_for(cfg, &g.0, batch), g.0.h)
                            };
                            let local = params.snapshot();
                            let mut r = run_minibatch(model, cfg, &local, &mut replica, batch, level)?;
                            let grad_norm = clip_global_norm(&mut r.grads, cfg.clip_norm);
                            shared_update(&rms, params, mean_square, &mut velocity, &r.grads)?;
                            let done = completed.fetch_add(1, Ordering::Relaxed) + 1;
                            {
                                let mut g = shared.lock().expect("curriculum lock");
                                if cfg.curriculum {
                                    g.0.observe(r.loss_bits);
                                }
                                if g.1.len() == cfg.stop_window {
                                    g.1.pop_front();
                                }
                                g.1.push_back(r.loss_bits);
                                if let (Some(target), true) = (cfg.stop_bits, g.1.len() == cfg.stop_window) {
                                    if g.1.iter().sum::<f64>() / (g.1.len() as f64) < target {
                                        stop.store(true, Ordering::Relaxed);
                                    }
                                }
                            }
                            let m = Metrics {
                                minibatch: batch,
                                episode: done * cfg.minibatch as u64,
                                level,
                                h,
                                loss: r.loss_bits,
                                grad_norm,
                                journal_bytes: r.journal_bytes,
                                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                            };
                            if tx.send(Ok(m)).is_err() {
                                return Ok(());
                            }
                        }
                    };
                    if let Err(e) = work() {
                        stop.store(true, Ordering::Relaxed);
                        let _ = tx.send(Err(e));
                    }
                });
            }
            drop(tx);
            for msg in rx {
                let res = msg.and_then(|m| sink(&m));
                if let Err(e) = res {
                    stop.store(true, Ordering::Relaxed);
                    first_error.get_or_insert(e);
                }
            }
        });
        if let Some(e) = first_error {
            return Err(e);
        }
        self.params = params.snapshot();
        self.opt.mean_square = mean_square.snapshot();
        self.done = completed.load(Ordering::Relaxed);
        let (cur, recent) = shared.into_inner().expect("curriculum lock");
        self.curriculum = cur;
        self.recent = recent;
        Ok(if self.converged() {
            StopReason::Converged
        } else {
            StopReason::Budget
        })
    }

    pub fn to_snapshot(&self) -> Result<Snapshot> {
        let mut s = Snapshot::new();
        s.put_bytes("train.config", self.config.to_text().into_bytes());
        s.put_bytes(
            "model.config",
            serde_json::to_vec(self.model.config()).map_err(|e| Error::Format(e.to_string()))?,
        );
        s.put_f64("params", self.params.clone());
        s.put_f64("opt.mean_square", self.opt.mean_square.clone());
        s.put_f64("opt.velocity", self.opt.velocity.clone());
        s.put_bytes(
            "curriculum",
            serde_json::to_vec(&self.curriculum).map_err(|e| Error::Format(e.to_string()))?,
        );
        s.put_f64("recent", self.recent.iter().copied().collect());
        s.put_u64("progress", vec![self.done]);
        Ok(s)
    }

    pub fn from_snapshot(snap: &Snapshot) -> Result<Self> {
        let text = std::str::from_utf8(snap.bytes("train.config")?)
            .map_err(|_| Error::Format("config is not utf-8".into()))?;
        let mut t = Trainer::new(TrainConfig::parse(text)?)?;
        let n = t.params.len();
        let load = |name: &str| -> Result<Vec<f64>> {
            let v = snap.f64s(name)?;
            check_dim("checkpoint vector", n, v.len())?;
            Ok(v.to_vec())
        };
        t.params = load("params")?;
        t.opt.mean_square = load("opt.mean_square")?;
        t.opt.velocity = load("opt.velocity")?;
        t.curriculum = serde_json::from_slice(snap.bytes("curriculum")?)
            .map_err(|e| Error::Format(format!("curriculum: {e}")))?;
        t.recent = snap.f64s("recent")?.iter().copied().collect();
        t.done = *snap
            .u64s("progress")?
            .first()
            .ok_or_else(|| Error::Format("empty progress".into()))?;
        Ok(t)
    }

    /// Changes the minibatch budget, e.g. to continue a finished run.
    pub fn set_minibatches(&mut self, n: u64) {
        self.config.minibatches = n;
    }
}

fn rms_config(c: &TrainConfig) -> RmsPropConfig {
    RmsPropConfig {
        learning_rate: c.learning_rate,
        decay: c.rms_decay,
        epsilon: c.rms_epsilon,
        momentum: c.momentum,
    }
}

fn curriculum_config(c: &TrainConfig) -> CurriculumConfig {
    CurriculumConfig {
        threshold: c.curriculum_threshold,
        patience: c.curriculum_patience,
        initial_level: c.initial_level,
        max_level: c.max_level,
    }
}

/// Loads trained parameters and the model definition from a checkpoint.
pub fn load_model(snap: &Snapshot) -> Result<(Model, Vec<f64>, TrainConfig)> {
    let t = Trainer::from_snapshot(snap)?;
    Ok((t.model.clone(), t.params.clone(), t.config.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub level: usize,
    /// Mean wrong bits per episode.
    pub mean_bit_error: f64,
    /// Wrong bits over answer bits.
    pub error_per_bit: f64,
    pub episodes: usize,
}

/// Bit error of `model` on `episodes` fresh episodes per level. Parameters
/// are only read.
pub fn evaluate_levels(
    model: &Model,
    params: &[f64],
    template: &TaskConfig,
    levels: &[usize],
    episodes: usize,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    check_dim("episode input width", model.config().input_size, template.input_width())?;
    check_dim("episode output width", model.config().output_size, template.output_width())?;
    let mut replica = model.new_replica()?;
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let (mut err, mut bits) = (0.0, 0.0);
        for e in 0..episodes {
            let cfg = TaskConfig {
                level,
                seed: mix_seed(seed, level as u64, e as u64),
                ..template.clone()
            };
            let ep = generate(&cfg)?;
            let out = model.evaluate(params, &mut replica, &ep)?;
            err += bit_error(&out.outputs, &ep)?;
            bits += ep.answer_bits();
        }
        rows.push(EvalRow {
            level,
            mean_bit_error: err / episodes.max(1) as f64,
            error_per_bit: if bits > 0.0 { err / bits } else { 0.0 },
            episodes,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;
    use crate::tasks::TaskKind;

    fn tiny(kind: ModelKind) -> TrainConfig {
        TrainConfig {
            model: kind,
            hidden: 12,
            slots: 16,
            word_size: 6,
            heads: 1,
            minibatch: 2,
            minibatches: 6,
            max_level: 3,
            learning_rate: 1e-3,
            checkpoint_every: 0,
            ..TrainConfig::default()
        }
    }

    fn collect(t: &mut Trainer) -> Vec<Metrics> {
        let mut out = Vec::new();
        t.run(&mut |m| Ok(out.push(m.clone())), &mut |_| Ok(())).unwrap();
        out
    }

    fn strip(ms: &[Metrics]) -> Vec<Metrics> {
        ms.iter().map(|m| Metrics { wall_ms: 0.0, ..m.clone() }).collect()
    }

    #[test]
    fn serial_runs_are_bit_identical() {
        let a = collect(&mut Trainer::new(tiny(ModelKind::SamExact)).unwrap());
        let b = collect(&mut Trainer::new(tiny(ModelKind::SamExact)).unwrap());
        assert_eq!(a.len(), 6);
        assert_eq!(strip(&a), strip(&b));
        let mut t1 = Trainer::new(tiny(ModelKind::SamExact)).unwrap();
        let mut t2 = Trainer::new(tiny(ModelKind::SamExact)).unwrap();
        collect(&mut t1);
        collect(&mut t2);
        assert_eq!(t1.params(), t2.params());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let mut full = Trainer::new(tiny(ModelKind::Dam)).unwrap();
        let all = collect(&mut full);
        let mut first = Trainer::new(TrainConfig {
            minibatches: 3,
            ..tiny(ModelKind::Dam)
        })
        .unwrap();
        let mut head = collect(&mut first);
        let mut buf = Vec::new();
        first.to_snapshot().unwrap().write_to(&mut buf).unwrap();
        let mut resumed = Trainer::from_snapshot(&Snapshot::read_from(buf.as_slice()).unwrap()).unwrap();
        resumed.set_minibatches(6);
        head.extend(collect(&mut resumed));
        assert_eq!(strip(&head), strip(&all));
        assert_eq!(resumed.params(), full.params());
        assert_eq!(resumed.optimizer(), full.optimizer());
    }

    #[test]
    fn hogwild_workers_train() {
        let mut t = Trainer::new(TrainConfig {
            hogwild: true,
            workers: 3,
            minibatches: 9,
            ..tiny(ModelKind::SamExact)
        })
        .unwrap();
        let before = t.params().to_vec();
        let ms = collect(&mut t);
        assert_eq!(ms.len(), 9);
        assert_eq!(t.minibatches_done(), 9);
        let mut ids: Vec<u64> = ms.iter().map(|m| m.minibatch).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..9).collect::<Vec<_>>());
        assert_ne!(t.params(), &before[..]);
    }

    #[test]
    fn curriculum_levels_respect_h() {
        let mut cfg = tiny(ModelKind::Lstm);
        cfg.curriculum = true;
        cfg.max_level = 8;
        cfg.minibatches = 20;
        let ms = collect(&mut Trainer::new(cfg).unwrap());
        assert!(ms.iter().all(|m| m.level >= 1 && m.level <= m.h.max(1)));
    }

    #[test]
    fn stops_when_converged() {
        let mut cfg = tiny(ModelKind::Lstm);
        cfg.stop_bits = Some(1e9);
        cfg.stop_window = 2;
        let mut t = Trainer::new(cfg).unwrap();
        let mut n = 0;
        let reason = t.run(&mut |_| Ok(n += 1), &mut |_| Ok(())).unwrap();
        assert_eq!(reason, StopReason::Converged);
        assert_eq!(n, 2);
    }

    #[test]
    fn untrained_recall_is_near_chance() {
        let cfg = TrainConfig {
            task: TaskKind::Recall,
            ..tiny(ModelKind::SamExact)
        };
        let t = Trainer::new(cfg.clone()).unwrap();
        let rows = evaluate_levels(t.model(), t.params(), &cfg.task_config(1, 0), &[2, 4], 200, 9).unwrap();
        for r in &rows {
            // 200 episodes × 8 bits: sd of the rate is about 0.018
            assert!((r.error_per_bit - 0.5).abs() < 0.1, "{r:?}");
        }
        assert!(evaluate_levels(t.model(), t.params(), &cfg.task_config(1, 0), &[0], 1, 9).is_err());
    }

    #[test]
    fn eval_rejects_width_mismatch() {
        let t = Trainer::new(tiny(ModelKind::SamExact)).unwrap();
        let sort = TaskConfig::new(TaskKind::Sort, 3, 0);
        assert!(evaluate_levels(t.model(), t.params(), &sort, &[3], 1, 0).is_err());
    }
}
