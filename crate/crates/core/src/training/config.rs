//! Training configuration, read from a flat `key = value` file.
//!
//! ```text
//! model = "sam-exact"
//! task = "copy"
//! learning_rate = 1e-4
//! max_level = 5
//! ```
//!
//! Unknown keys are rejected. Every key has a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ann::{AnnConfig, Backend};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind};
use crate::tasks::{input_width, TaskConfig, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub task: TaskKind,
    pub seed: u64,

    pub learning_rate: f64,
    pub minibatch: usize,
    /// Worker threads in hogwild mode.
    pub workers: usize,
    /// Shared-parameter asynchronous workers instead of the serial loop.
    pub hogwild: bool,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    pub momentum: f64,
    /// Global gradient norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Minibatches to train for.
    pub minibatches: u64,
    /// Stop early once the mean loss over the last `stop_window`
    /// minibatches falls below this many bits per answer step.
    pub stop_bits: Option<f64>,
    pub stop_window: usize,

    /// Without a curriculum, levels are drawn uniformly from
    /// `min_level..=max_level`.
    pub curriculum: bool,
    pub curriculum_threshold: f64,
    pub curriculum_patience: usize,
    pub initial_level: usize,
    pub min_level: usize,
    /// Upper bound on the level, with or without a curriculum.
    pub max_level: usize,

    pub word_bits: usize,
    pub item_words: usize,

    pub hidden: usize,
    pub slots: usize,
    pub word_size: usize,
    pub heads: usize,
    pub k: usize,
    pub k_l: usize,
    pub delta: f64,
    pub lambda: f64,
    pub ann: Backend,
    pub kd_trees: usize,
    pub kd_checks: usize,
    pub lsh_tables: usize,
    pub lsh_bits: usize,

    /// Write a checkpoint every this many minibatches; 0 only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            model: ModelKind::SamExact,
            task: TaskKind::Copy,
            seed: 1,
            learning_rate: 1e-5,
            minibatch: 8,
            workers: 8,
            hogwild: false,
            rms_decay: 0.9,
            rms_epsilon: 1e-6,
            momentum: 0.9,
            clip_norm: 10.0,
            minibatches: 20_000,
            stop_bits: None,
            stop_window: 100,
            curriculum: false,
            curriculum_threshold: 0.01,
            curriculum_patience: 100,
            initial_level: 1,
            min_level: 1,
            max_level: 20,
            word_bits: 8,
            item_words: 1,
            hidden: m.hidden,
            slots: m.slots,
            word_size: m.word_size,
            heads: m.heads,
            k: m.k,
            k_l: m.k_l,
            delta: m.delta,
            lambda: m.lambda,
            ann: Backend::KdForest,
            kd_trees: m.ann.kd_trees,
            kd_checks: m.ann.kd_checks,
            lsh_tables: m.ann.lsh_tables,
            lsh_bits: m.ann.lsh_bits,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| {
            // name the key on the offending line
            let field = e
                .span()
                .and_then(|sp| {
                    let start = text[..sp.start].rfind('\n').map_or(0, |i| i + 1);
                    let line = text[start..].lines().next()?;
                    let key = line.split('=').next()?.trim();
                    (!key.is_empty()).then(|| key.to_string())
                })
                .unwrap_or_else(|| "config".into());
            Error::Config {
                field,
                reason: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.learning_rate) {
            return Err(Error::config("learning_rate", "must be > 0"));
        }
        if self.minibatch == 0 {
            return Err(Error::config("minibatch", "must be ≥ 1"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return Err(Error::config("rms_decay", "must be in [0, 1)"));
        }
        if !positive(self.rms_epsilon) {
            return Err(Error::config("rms_epsilon", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config("clip_norm", "must be ≥ 0"));
        }
        if self.stop_bits.is_some_and(|b| !positive(b)) {
            return Err(Error::config("stop_bits", "must be > 0"));
        }
        if self.stop_window == 0 {
            return Err(Error::config("stop_window", "must be ≥ 1"));
        }
        if !positive(self.curriculum_threshold) {
            return Err(Error::config("curriculum_threshold", "must be > 0"));
        }
        if self.curriculum_patience == 0 {
            return Err(Error::config("curriculum_patience", "must be ≥ 1"));
        }
        if self.initial_level == 0 {
            return Err(Error::config("initial_level", "must be ≥ 1"));
        }
        if self.min_level == 0 || self.min_level > self.max_level {
            return Err(Error::config("min_level", "need 1 ≤ min_level ≤ max_level"));
        }
        if self.curriculum && self.initial_level > self.max_level {
            return Err(Error::config("initial_level", "exceeds max_level"));
        }
        self.task_config(self.max_level, 0).validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut ann = match self.ann {
            Backend::Exact => AnnConfig::exact(),
            Backend::KdForest => AnnConfig::kd_forest(self.kd_trees, self.kd_checks),
            Backend::Lsh => AnnConfig::lsh(self.lsh_tables, self.lsh_bits),
        };
        ann.seed ^= self.seed;
        ModelConfig {
            kind: self.model,
            input_size: input_width(self.task, self.word_bits),
            output_size: self.word_bits,
            hidden: self.hidden,
            slots: self.slots,
            word_size: self.word_size,
            heads: self.heads,
            k: self.k,
            delta: self.delta,
            lambda: self.lambda,
            ann,
            k_l: self.k_l,
        }
    }

    pub fn task_config(&self, level: usize, seed: u64) -> TaskConfig {
        TaskConfig {
            task: self.task,
            level,
            word_bits: self.word_bits,
            item_words: self.item_words,
            sort_outputs: None,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
        assert_eq!(TrainConfig::parse("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let cfg = TrainConfig {
            model: ModelKind::Dam,
            task: TaskKind::Recall,
            stop_bits: Some(0.05),
            learning_rate: 3e-4,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parses_flat_keys_and_aliases() {
        let cfg = TrainConfig::parse(
            "# smoke\nmodel = \"sam\"\ntask = \"sort\"\nminibatch = 4\nann = \"lsh\"\nmax_level = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.model, ModelKind::SamExact);
        assert_eq!(cfg.task, TaskKind::Sort);
        assert_eq!(cfg.minibatch, 4);
        assert_eq!(cfg.model_config().input_size, 10);
    }

    #[test]
    fn errors_name_the_field() {
        let field = |text: &str| match TrainConfig::parse(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field("learning_rate = 0.0"), "learning_rate");
        assert_eq!(field("minibatch = 0"), "minibatch");
        assert_eq!(field("bogus = 1"), "bogus");
        assert_eq!(field("seed = 2\nheads = \"four\""), "heads");
        assert_eq!(field("min_level = 9\nmax_level = 3"), "min_level");
        assert_eq!(field("model = \"sam-ann\"\nann = \"exact\""), "ann");
    }
}
