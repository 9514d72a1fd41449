//! Time and space sweeps over memory size.
//!
//! Each (model, N) cell times `minibatch` forward+backward passes of a
//! `steps`-long episode, reporting the median over `trials` after warmup.
//! Time is measured on a memory filled with random rows. Space is the
//! rollback tape per step and the peak extra heap during one episode that
//! starts from an empty memory, both excluding the memory matrix itself.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alloc;
use crate::ann::AnnConfig;
use crate::error::{Error, Result};
use crate::la::DenseMatrix;
use crate::model::{Model, ModelConfig, ModelKind};
use crate::tasks::{Episode, TaskKind};

pub const CSV_HEADER: &str = "model,n,ms_per_pass,journal_bytes_per_step,peak_bytes,status";

/// Bumped whenever the columns or their formatting change.
pub const CSV_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub models: Vec<ModelKind>,
    pub sizes: Vec<usize>,
    pub steps: usize,
    pub minibatch: usize,
    pub trials: usize,
    pub warmup: usize,
    /// Dense models are skipped above this N.
    pub dense_ceiling: usize,
    /// Cells whose estimated footprint exceeds this are skipped.
    pub memory_budget: usize,
    pub hidden: usize,
    pub word_size: usize,
    pub heads: usize,
    pub k: usize,
    pub ann: AnnConfig,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            models: vec![ModelKind::SamAnn, ModelKind::SamExact, ModelKind::Dam, ModelKind::NtmDense],
            sizes: (10..=17).map(|p| 1usize << p).collect(),
            steps: 100,
            minibatch: 8,
            trials: 5,
            warmup: 1,
            dense_ceiling: 1 << 14,
            memory_budget: 2 << 30,
            hidden: 100,
            word_size: 32,
            heads: 4,
            k: 4,
            ann: AnnConfig::kd_forest(4, 32),
            seed: 7,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::config("models", "empty model list"));
        }
        if let Some(m) = self.models.iter().find(|m| !m.has_memory()) {
            return Err(Error::config("models", format!("{m} has no memory to sweep")));
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(Error::config("sizes", "need at least one N ≥ 1"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be ≥ 1"));
        }
        if self.minibatch == 0 {
            return Err(Error::config("minibatch", "must be ≥ 1"));
        }
        if self.trials < 5 {
            return Err(Error::config("trials", "must be ≥ 5"));
        }
        Ok(())
    }

    fn model_config(&self, kind: ModelKind, n: usize) -> ModelConfig {
        ModelConfig {
            kind,
            input_size: 9,
            output_size: 8,
            hidden: self.hidden,
            slots: n,
            word_size: self.word_size,
            heads: self.heads,
            k: self.k.min(n),
            ann: self.ann.clone(),
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum BenchStatus {
    Ok,
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub model: ModelKind,
    pub n: usize,
    /// Median wall time of one minibatch forward+backward.
    pub ms: f64,
    pub journal_bytes_per_step: f64,
    /// `None` when the counting allocator is not installed.
    pub peak_bytes: Option<usize>,
    pub status: BenchStatus,
}

impl BenchResult {
    fn skipped(model: ModelKind, n: usize, reason: impl Into<String>) -> Self {
        BenchResult {
            model,
            n,
            ms: 0.0,
            journal_bytes_per_step: 0.0,
            peak_bytes: None,
            status: BenchStatus::Skipped(reason.into()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == BenchStatus::Ok
    }

    pub fn csv_row(&self) -> String {
        match &self.status {
            BenchStatus::Ok => format!(
                "{},{},{:.4},{:.1},{},ok",
                self.model,
                self.n,
                self.ms,
                self.journal_bytes_per_step,
                self.peak_bytes.map_or(String::new(), |b| b.to_string())
            ),
            BenchStatus::Skipped(why) => format!("{},{},,,,skipped: {}", self.model, self.n, why.replace(',', ";")),
        }
    }
}

/// A random episode of `steps` steps with every step answered.
pub fn random_episode(steps: usize, input: usize, output: usize, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = |n: usize| -> Vec<f64> { (0..n).map(|_| f64::from(rng.random::<bool>() as u8)).collect() };
    Episode {
        task: TaskKind::Copy,
        steps,
        input_width: input,
        output_width: output,
        inputs: bits(steps * input),
        targets: bits(steps * output),
        mask: vec![1.0; steps],
    }
}

/// Rough heap needed for one cell, used to skip cells that would not fit.
pub fn estimate_bytes(kind: ModelKind, n: usize, word: usize, steps: usize) -> usize {
    let mem = n.saturating_mul(word).saturating_mul(8);
    let mut total = mem.saturating_mul(4);
    if kind.is_dense() {
        // dense tapes keep a full copy of memory-sized state per step
        total = total.saturating_add(mem.saturating_mul(steps + 1));
    }
    if kind == ModelKind::DncDense {
        total = total.saturating_add(n.saturating_mul(n).saturating_mul(8 * 3));
    }
    total
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Measures one cell.
pub fn bench_cell(cfg: &BenchConfig, kind: ModelKind, n: usize) -> Result<BenchResult> {
    if kind.is_dense() && n > cfg.dense_ceiling {
        return Ok(BenchResult::skipped(kind, n, format!("dense ceiling {}", cfg.dense_ceiling)));
    }
    let need = estimate_bytes(kind, n, cfg.word_size, cfg.steps);
    if need > cfg.memory_budget {
        return Ok(BenchResult::skipped(
            kind,
            n,
            format!("out of memory: needs about {need} bytes, budget {}", cfg.memory_budget),
        ));
    }
    let mut model = Model::new(cfg.model_config(kind, n))?;
    model.set_verify_rollback(false);
    // same parameters at every N
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ n as u64);
    let episodes: Vec<Episode> = (0..cfg.minibatch)
        .map(|j| random_episode(cfg.steps, 9, 8, cfg.seed.wrapping_add(j as u64)))
        .collect();

    // space: one episode from an empty memory
    let mut fresh = model.new_replica()?;
    let track = alloc::is_active();
    alloc::reset_peak();
    let base = alloc::live();
    let first = model.run_episode(&params, &mut fresh, &episodes[0])?;
    let peak_bytes = track.then(|| alloc::peak().saturating_sub(base));
    let journal_bytes_per_step = first.journal_bytes as f64 / cfg.steps as f64;
    drop(first);
    drop(fresh);

    // time: a full memory, so the index holds N rows
    let m = cfg.word_size;
    let rows: Vec<f64> = (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut replica = model.replica_with_memory(DenseMatrix::from_vec(n, m, rows)?)?;
    let mut pass = || -> Result<f64> {
        let t0 = Instant::now();
        for ep in &episodes {
            std::hint::black_box(model.run_episode(&params, &mut replica, ep)?);
        }
        Ok(t0.elapsed().as_secs_f64() * 1e3)
    };
    for _ in 0..cfg.warmup {
        pass()?;
    }
    let mut times = (0..cfg.trials).map(|_| pass()).collect::<Result<Vec<_>>>()?;
    Ok(BenchResult {
        model: kind,
        n,
        ms: median(&mut times),
        journal_bytes_per_step,
        peak_bytes,
        status: BenchStatus::Ok,
    })
}

/// Runs the whole sweep, calling `row` as each cell finishes.
pub fn run_bench(cfg: &BenchConfig, row: &mut dyn FnMut(&BenchResult)) -> Result<Vec<BenchResult>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &kind in &cfg.models {
        for &n in &cfg.sizes {
            let r = bench_cell(cfg, kind, n)?;
            row(&r);
            out.push(r);
        }
    }
    Ok(out)
}

/// Least-squares slope of `ln ms` against `ln N` over the measured rows of
/// `kind`, with the number of points used.
pub fn fit_exponent(rows: &[BenchResult], kind: ModelKind) -> Option<(f64, usize)> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.model == kind && r.is_ok() && r.ms > 0.0)
        .map(|r| ((r.n as f64).ln(), r.ms.ln()))
        .collect();
    log_log_slope(&pts).map(|s| (s, pts.len()))
}

fn log_log_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig {
            models: vec![ModelKind::SamExact, ModelKind::NtmDense],
            sizes: vec![32, 64],
            steps: 4,
            minibatch: 1,
            trials: 5,
            warmup: 0,
            dense_ceiling: 32,
            hidden: 8,
            word_size: 4,
            heads: 1,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0f64, 2.0, 4.0, 8.0]
            .iter()
            .map(|&n| (n.ln(), (3.0 * n.powf(0.7)).ln()))
            .collect();
        assert!((log_log_slope(&pts).unwrap() - 0.7).abs() < 1e-12);
        assert!(log_log_slope(&pts[..1]).is_none());
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn sweep_rows_and_skips() {
        let rows = run_bench(&small(), &mut |_| {}).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().filter(|r| r.model == ModelKind::SamExact).all(|r| r.is_ok() && r.ms > 0.0));
        let dense_big = &rows[3];
        assert!(!dense_big.is_ok());
        assert_eq!(dense_big.csv_row(), "ntm-dense,64,,,,skipped: dense ceiling 32");
        assert_eq!(rows[0].journal_bytes_per_step, rows[1].journal_bytes_per_step, "{rows:?}");
        assert!(rows[2].journal_bytes_per_step > rows[0].journal_bytes_per_step);
    }

    #[test]
    fn budget_skips_instead_of_crashing() {
        let cfg = BenchConfig {
            models: vec![ModelKind::DncDense],
            sizes: vec![1 << 14],
            dense_ceiling: 1 << 20,
            ..small()
        };
        let rows = run_bench(&cfg, &mut |_| {}).unwrap();
        assert!(matches!(&rows[0].status, BenchStatus::Skipped(s) if s.starts_with("out of memory")));
    }

    #[test]
    fn rejects_bad_sweeps() {
        let bad = |f: fn(&mut BenchConfig)| {
            let mut c = small();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.trials = 3));
        assert!(bad(|c| c.sizes.clear()));
        assert!(bad(|c| c.models = vec![ModelKind::Lstm]));
    }
}
