//! Exponential curriculum: the maximum level `h` doubles whenever the mean
//! loss over a full window falls below a threshold. Each minibatch trains
//! at a level drawn uniformly from `0..=h`.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    /// Bits per answer step.
    pub threshold: f64,
    /// Window length, in observed losses.
    pub patience: usize,
    pub initial_level: usize,
    /// `h` never grows past this.
    pub max_level: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            threshold: 0.01,
            patience: 100,
            initial_level: 1,
            max_level: usize::MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub config: CurriculumConfig,
    pub h: usize,
    pub window: VecDeque<f64>,
    pub episodes_at_level: u64,
}

impl CurriculumState {
    pub fn new(config: CurriculumConfig) -> Self {
        CurriculumState {
            config,
            h: config.initial_level.max(1),
            window: VecDeque::with_capacity(config.patience),
            episodes_at_level: 0,
        }
    }

    /// Records one loss; returns whether `h` doubled.
    pub fn observe(&mut self, loss_bits: f64) -> bool {
        self.episodes_at_level += 1;
        if self.window.len() == self.config.patience {
            self.window.pop_front();
        }
        self.window.push_back(loss_bits);
        if self.window.len() < self.config.patience || self.h >= self.config.max_level {
            return false;
        }
        let mean = self.window.iter().sum::<f64>() / self.window.len() as f64;
        if mean < self.config.threshold {
            self.h = self.h.saturating_mul(2).min(self.config.max_level);
            self.window.clear();
            self.episodes_at_level = 0;
            return true;
        }
        false
    }

    /// A level drawn uniformly from `0..=h`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        rng.random_range(0..=self.h)
    }

    /// Observes `loss_bits` and draws the next level.
    pub fn step<R: Rng>(&mut self, loss_bits: f64, rng: &mut R) -> usize {
        self.observe(loss_bits);
        self.sample(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn cur(patience: usize) -> CurriculumState {
        CurriculumState::new(CurriculumConfig {
            threshold: 0.01,
            patience,
            initial_level: 1,
            max_level: 64,
        })
    }

    #[test]
    fn high_losses_never_double() {
        let mut c = cur(10);
        for _ in 0..1000 {
            assert!(!c.observe(0.5));
        }
        assert_eq!(c.h, 1);
    }

    #[test]
    fn doubles_once_after_patience_then_resets() {
        let mut c = cur(10);
        for i in 0..9 {
            assert!(!c.observe(0.001), "early at {i}");
        }
        assert!(c.observe(0.001));
        assert_eq!(c.h, 2);
        assert!(c.window.is_empty());
        for _ in 0..9 {
            assert!(!c.observe(0.001));
        }
        assert_eq!(c.h, 2);
        assert!(c.observe(0.001));
        assert_eq!(c.h, 4);
    }

    #[test]
    fn windowed_mean_decides() {
        let mut c = cur(4);
        // mean of [0.03, 0, 0, 0] = 0.0075 < 0.01
        for l in [0.05, 0.03, 0.0, 0.0] {
            c.observe(l);
        }
        assert_eq!(c.h, 1);
        assert!(c.observe(0.0));
        assert_eq!(c.h, 2);
    }

    #[test]
    fn capped_at_max_level() {
        let mut c = cur(1);
        for _ in 0..20 {
            c.observe(0.0);
        }
        assert_eq!(c.h, 64);
    }

    #[test]
    fn levels_uniform_chi_square() {
        let mut c = cur(1);
        c.h = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut counts = [0usize; 9];
        for _ in 0..n {
            counts[c.sample(&mut rng)] += 1;
        }
        let e = n as f64 / 9.0;
        let chi2: f64 = counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new(8.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2} p {p}");
    }
}
