//! RMSProp with momentum, and global-norm gradient clipping.
//!
//! ```text
//! s ← ρ·s + (1−ρ)·g²
//! m ← μ·m + (1−μ)·g / √(s + ε)
//! θ ← θ − lr·m
//! ```
//!
//! Momentum is an exponential average, so a constant gradient drives the
//! step towards `lr·sign(g)`.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            learning_rate: 1e-5,
            decay: 0.9,
            epsilon: 1e-6,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    pub mean_square: Vec<f64>,
    pub velocity: Vec<f64>,
}

fn check_finite(grads: &[f64]) -> Result<()> {
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient[{i}] = {}", grads[i])));
    }
    Ok(())
}

impl RmsProp {
    pub fn new(config: RmsPropConfig, len: usize) -> Self {
        RmsProp {
            config,
            mean_square: vec![0.0; len],
            velocity: vec![0.0; len],
        }
    }

    /// One update. A non-finite gradient aborts before anything changes.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_dim("rmsprop params", self.mean_square.len(), params.len())?;
        check_dim("rmsprop grads", self.mean_square.len(), grads.len())?;
        check_finite(grads)?;
        let c = self.config;
        for i in 0..params.len() {
            let g = grads[i];
            let s = c.decay * self.mean_square[i] + (1.0 - c.decay) * g * g;
            self.mean_square[i] = s;
            let v = c.momentum * self.velocity[i] + (1.0 - c.momentum) * g / (s + c.epsilon).sqrt();
            self.velocity[i] = v;
            params[i] -= c.learning_rate * v;
        }
        Ok(())
    }
}

/// `f64` slots readable and writable from many threads without locks.
/// Concurrent updates race; the last store wins.
#[derive(Debug)]
pub struct SharedVec(Vec<AtomicU64>);

impl SharedVec {
    pub fn new(values: &[f64]) -> Self {
        SharedVec(values.iter().map(|v| AtomicU64::new(v.to_bits())).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        f64::from_bits(self.0[i].load(Ordering::Relaxed))
    }

    pub fn set(&self, i: usize, v: f64) {
        self.0[i].store(v.to_bits(), Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

/// Lock-free RMSProp step for shared parameters. The mean-square
/// accumulator is shared; each worker keeps its own velocity.
pub fn shared_update(
    config: &RmsPropConfig,
    params: &SharedVec,
    mean_square: &SharedVec,
    velocity: &mut [f64],
    grads: &[f64],
) -> Result<()> {
    check_dim("rmsprop params", params.len(), grads.len())?;
    check_dim("rmsprop velocity", params.len(), velocity.len())?;
    check_finite(grads)?;
    let c = config;
    for i in 0..grads.len() {
        let g = grads[i];
        let s = c.decay * mean_square.get(i) + (1.0 - c.decay) * g * g;
        mean_square.set(i, s);
        let v = c.momentum * velocity[i] + (1.0 - c.momentum) * g / (s + c.epsilon).sqrt();
        velocity[i] = v;
        params.set(i, params.get(i) - c.learning_rate * v);
    }
    Ok(())
}

/// Scales `grads` so its Euclidean norm is at most `max_norm` (0 disables).
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(lr: f64) -> RmsPropConfig {
        RmsPropConfig {
            learning_rate: lr,
            ..RmsPropConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = RmsProp::new(cfg(0.1), 3);
        let mut p = vec![1.0, -2.0, 3.0];
        for _ in 0..10 {
            opt.update(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr_sign() {
        let lr = 1e-3;
        let mut opt = RmsProp::new(cfg(lr), 2);
        let mut p = vec![0.0, 0.0];
        let g = [2.5, -0.4];
        for _ in 0..500 {
            opt.update(&mut p, &g).unwrap();
        }
        let before = p.clone();
        opt.update(&mut p, &g).unwrap();
        for k in 0..2 {
            let step = p[k] - before[k];
            // fixed point: g/√(g²+ε) is within ε/(2g²) of sign(g)
            let expect = -lr * g[k].signum();
            assert!((step - expect).abs() < lr * 1e-5, "{step} vs {expect}");
        }
    }

    #[test]
    fn matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 7;
        let c = RmsPropConfig {
            learning_rate: 0.01,
            decay: 0.95,
            epsilon: 1e-8,
            momentum: 0.5,
        };
        let mut opt = RmsProp::new(c, n);
        let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut reference = p.clone();
        let (mut s, mut m) = (vec![0.0; n], vec![0.0; n]);
        for _ in 0..100 {
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            opt.update(&mut p, &g).unwrap();
            for i in 0..n {
                s[i] = 0.95 * s[i] + 0.05 * g[i].powi(2);
                m[i] = 0.5 * m[i] + 0.5 * (g[i] / (s[i] + 1e-8).sqrt());
                reference[i] -= 0.01 * m[i];
            }
        }
        for i in 0..n {
            assert!((p[i] - reference[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut opt = RmsProp::new(cfg(0.1), 3);
        let mut p = vec![1.0, 2.0, 3.0];
        let err = opt.update(&mut p, &[0.1, f64::NAN, 0.2]).unwrap_err();
        assert!(err.to_string().contains("gradient[1]"));
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
        assert!(opt.mean_square.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn shared_update_matches_serial() {
        let c = cfg(0.05);
        let mut opt = RmsProp::new(c, 4);
        let mut p = vec![0.5, -0.5, 1.0, 0.0];
        let shared = SharedVec::new(&p);
        let ms = SharedVec::new(&[0.0; 4]);
        let mut vel = vec![0.0; 4];
        for step in 0..20 {
            let g: Vec<f64> = (0..4).map(|i| ((step * 4 + i) as f64).sin()).collect();
            opt.update(&mut p, &g).unwrap();
            shared_update(&c, &shared, &ms, &mut vel, &g).unwrap();
        }
        assert_eq!(shared.snapshot(), p);
        assert_eq!(ms.snapshot(), opt.mean_square);
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g, vec![3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut h = vec![30.0, 40.0];
        clip_global_norm(&mut h, 0.0);
        assert_eq!(h, vec![30.0, 40.0]);
    }
}
