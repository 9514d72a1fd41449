//! Synthetic episode generators: copy, associative recall, priority sort.
//!
//! Encodings follow the usual NTM conventions. Every input step carries the
//! data bits followed by task-specific flag channels; outputs are the data
//! bits only. The loss mask is 1 on answer steps and 0 elsewhere.
//!
//! | task   | input channels                       | steps            |
//! |--------|--------------------------------------|------------------|
//! | copy   | bits, delimiter                      | `2L + 1`         |
//! | recall | bits, key flag, value flag, cue flag | `(2n + 2)·w`     |
//! | sort   | bits, priority in [−1, 1], delimiter | `n + 1 + m`      |

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Recall,
    Sort,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Recall => "recall",
            TaskKind::Sort => "sort",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "copy" => Some(TaskKind::Copy),
            "recall" => Some(TaskKind::Recall),
            "sort" => Some(TaskKind::Sort),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: TaskKind,
    /// Sequence length (copy), pair count (recall) or key count (sort).
    pub level: usize,
    pub word_bits: usize,
    /// Steps per key and per value in recall.
    pub item_words: usize,
    /// Sort output count; `None` means `⌈0.8·n⌉`.
    pub sort_outputs: Option<usize>,
    pub seed: u64,
}

impl TaskConfig {
    pub fn new(task: TaskKind, level: usize, seed: u64) -> Self {
        TaskConfig {
            task,
            level,
            word_bits: 8,
            item_words: 1,
            sort_outputs: None,
            seed,
        }
    }

    pub fn input_width(&self) -> usize {
        input_width(self.task, self.word_bits)
    }

    pub fn output_width(&self) -> usize {
        self.word_bits
    }

    pub fn validate(&self) -> Result<()> {
        if self.level == 0 {
            return Err(Error::config("level", "level 0 has no answer steps"));
        }
        if self.word_bits == 0 || self.word_bits > 64 {
            return Err(Error::config("word_bits", "must be in 1..=64"));
        }
        if self.item_words == 0 {
            return Err(Error::config("item_words", "must be at least 1"));
        }
        if let Some(m) = self.sort_outputs {
            if m == 0 || m > self.level {
                return Err(Error::config("sort_outputs", "must satisfy 1 ≤ m ≤ n"));
            }
        }
        if self.task == TaskKind::Recall && self.word_bits * self.item_words < 64 {
            let distinct = 1u128 << (self.word_bits * self.item_words);
            if (self.level as u128) > distinct {
                return Err(Error::config("level", "more pairs than distinct keys"));
            }
        }
        Ok(())
    }
}

pub fn input_width(task: TaskKind, word_bits: usize) -> usize {
    word_bits
        + match task {
            TaskKind::Copy => 1,
            TaskKind::Recall => 3,
            TaskKind::Sort => 2,
        }
}

/// Row-major `T × width` inputs and targets with a per-step loss mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: TaskKind,
    pub steps: usize,
    pub input_width: usize,
    pub output_width: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub mask: Vec<f64>,
}

impl Episode {
    fn new(task: TaskKind, steps: usize, input_width: usize, output_width: usize) -> Self {
        Episode {
            task,
            steps,
            input_width,
            output_width,
            inputs: vec![0.0; steps * input_width],
            targets: vec![0.0; steps * output_width],
            mask: vec![0.0; steps],
        }
    }

    pub fn input(&self, t: usize) -> &[f64] {
        &self.inputs[t * self.input_width..(t + 1) * self.input_width]
    }

    pub fn target(&self, t: usize) -> &[f64] {
        &self.targets[t * self.output_width..(t + 1) * self.output_width]
    }

    fn input_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.inputs[t * self.input_width..(t + 1) * self.input_width]
    }

    fn target_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.targets[t * self.output_width..(t + 1) * self.output_width]
    }

    pub fn answer_steps(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.0).count()
    }

    /// Total masked target bits.
    pub fn answer_bits(&self) -> f64 {
        self.mask.iter().map(|m| m * self.output_width as f64).sum()
    }
}

fn random_bits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect()
}

pub fn generate(cfg: &TaskConfig) -> Result<Episode> {
    match cfg.task {
        TaskKind::Copy => gen_copy(cfg),
        TaskKind::Recall => gen_recall(cfg),
        TaskKind::Sort => gen_sort(cfg),
    }
}

pub fn gen_copy(cfg: &TaskConfig) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (l, b) = (cfg.level, cfg.word_bits);
    let mut ep = Episode::new(TaskKind::Copy, 2 * l + 1, b + 1, b);
    for t in 0..l {
        let bits = random_bits(&mut rng, b);
        ep.input_mut(t)[..b].copy_from_slice(&bits);
        ep.target_mut(l + 1 + t).copy_from_slice(&bits);
        ep.mask[l + 1 + t] = 1.0;
    }
    ep.input_mut(l)[b] = 1.0;
    Ok(ep)
}

pub fn gen_recall(cfg: &TaskConfig) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, b, w) = (cfg.level, cfg.word_bits, cfg.item_words);
    let item = b * w;
    let mut keys: Vec<Vec<f64>> = Vec::with_capacity(n);
    while keys.len() < n {
        let k = random_bits(&mut rng, item);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let values: Vec<Vec<f64>> = (0..n).map(|_| random_bits(&mut rng, item)).collect();
    let cue = rng.random_range(0..n);
    let mut ep = Episode::new(TaskKind::Recall, (2 * n + 2) * w, b + 3, b);
    let mut t = 0;
    let put = |ep: &mut Episode, t: &mut usize, bits: &[f64], flag: usize| {
        for k in 0..w {
            let row = ep.input_mut(*t);
            row[..b].copy_from_slice(&bits[k * b..(k + 1) * b]);
            row[b + flag] = 1.0;
            *t += 1;
        }
    };
    for p in 0..n {
        put(&mut ep, &mut t, &keys[p], 0);
        put(&mut ep, &mut t, &values[p], 1);
    }
    put(&mut ep, &mut t, &keys[cue], 2);
    for k in 0..w {
        ep.target_mut(t).copy_from_slice(&values[cue][k * b..(k + 1) * b]);
        ep.mask[t] = 1.0;
        t += 1;
    }
    Ok(ep)
}

pub fn sort_outputs(cfg: &TaskConfig) -> usize {
    cfg.sort_outputs
        .unwrap_or_else(|| (cfg.level * 4).div_ceil(5))
}

pub fn gen_sort(cfg: &TaskConfig) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, b) = (cfg.level, cfg.word_bits);
    let m = sort_outputs(cfg);
    let keys: Vec<Vec<f64>> = (0..n).map(|_| random_bits(&mut rng, b)).collect();
    let mut prios: Vec<f64> = Vec::with_capacity(n);
    while prios.len() < n {
        let p = rng.random_range(-1.0..=1.0);
        if !prios.contains(&p) {
            prios.push(p);
        }
    }
    let mut ep = Episode::new(TaskKind::Sort, n + 1 + m, b + 2, b);
    for i in 0..n {
        let row = ep.input_mut(i);
        row[..b].copy_from_slice(&keys[i]);
        row[b] = prios[i];
    }
    ep.input_mut(n)[b + 1] = 1.0;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| prios[y].total_cmp(&prios[x]));
    for (k, &i) in order.iter().take(m).enumerate() {
        ep.target_mut(n + 1 + k).copy_from_slice(&keys[i]);
        ep.mask[n + 1 + k] = 1.0;
    }
    Ok(ep)
}

/// Masked Hamming distance between outputs thresholded at 0.5 and targets,
/// weighted by the mask.
pub fn bit_error(outputs: &[f64], ep: &Episode) -> Result<f64> {
    if outputs.len() != ep.targets.len() {
        return Err(Error::DimensionMismatch {
            context: "bit_error outputs",
            expected: ep.targets.len(),
            actual: outputs.len(),
        });
    }
    let w = ep.output_width;
    let mut err = 0.0;
    for t in 0..ep.steps {
        if ep.mask[t] == 0.0 {
            continue;
        }
        let wrong = (0..w)
            .filter(|&k| (outputs[t * w + k] > 0.5) != (ep.targets[t * w + k] > 0.5))
            .count();
        err += ep.mask[t] * wrong as f64;
    }
    Ok(err)
}

const EPISODE_MAGIC: &[u8; 8] = b"SAMEPIS\0";
const EPISODE_VERSION: u32 = 1;

/// Writes a self-describing little-endian record: magic, version, task
/// name, shape, then inputs, targets and mask as `f64`.
pub fn write_episode<W: Write>(ep: &Episode, out: &mut W) -> Result<()> {
    out.write_all(EPISODE_MAGIC)?;
    out.write_all(&EPISODE_VERSION.to_le_bytes())?;
    let name = ep.task.name().as_bytes();
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name)?;
    for v in [ep.steps, ep.input_width, ep.output_width] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    for x in ep.inputs.iter().chain(&ep.targets).chain(&ep.mask) {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_episode<R: Read>(input: &mut R) -> Result<Episode> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != EPISODE_MAGIC {
        return Err(Error::Format("not an episode record".into()));
    }
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != EPISODE_VERSION {
        return Err(Error::Format(format!("unsupported episode version {version}")));
    }
    input.read_exact(&mut b4)?;
    let len = u32::from_le_bytes(b4) as usize;
    if len > 64 {
        return Err(Error::Format("task name too long".into()));
    }
    let mut name = vec![0u8; len];
    input.read_exact(&mut name)?;
    let task = std::str::from_utf8(&name)
        .ok()
        .and_then(TaskKind::parse)
        .ok_or_else(|| Error::Format("unknown task".into()))?;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut b8 = [0u8; 8];
        input.read_exact(&mut b8)?;
        *d = u64::from_le_bytes(b8) as usize;
    }
    let [steps, iw, ow] = dims;
    if steps.checked_mul(iw.max(ow) + 1).is_none_or(|n| n > 1 << 28) {
        return Err(Error::Format("episode too large".into()));
    }
    let mut read_vec = |n: usize| -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(n);
        let mut b8 = [0u8; 8];
        for _ in 0..n {
            input.read_exact(&mut b8)?;
            v.push(f64::from_le_bytes(b8));
        }
        Ok(v)
    };
    let inputs = read_vec(steps * iw)?;
    let targets = read_vec(steps * ow)?;
    let mask = read_vec(steps)?;
    Ok(Episode {
        task,
        steps,
        input_width: iw,
        output_width: ow,
        inputs,
        targets,
        mask,
    })
}
