//! Finite-difference gradient checking.
//!
//! Perturbations that change a discrete choice (LRU slot, retained
//! neighbour set, truncation) are skipped: the loss is not differentiable
//! across them and the analytic gradient does not claim to be.

use serde::Serialize;

use crate::error::Result;
use crate::la::DenseMatrix;
use crate::model::{Model, Replica};
use crate::tasks::Episode;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest error, if any was checked.
    pub worst: Option<usize>,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Magnitude below which errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-4;

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum Stencil {
    /// `(f(x+ε) − f(x−ε)) / 2ε`, error O(ε²).
    #[default]
    Central,
    /// `(8(f(x+ε) − f(x−ε)) − (f(x+2ε) − f(x−2ε))) / 12ε`, error O(ε⁴).
    FivePoint,
}

/// Compares `analytic` with central differences of `f` around `x`.
/// `f` returns the loss and a signature of its discrete decisions.
pub fn check_with<F>(analytic: &[f64], x: &[f64], eps: f64, tolerance: f64, f: F) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, u64)>,
{
    check_with_stencil(analytic, x, eps, tolerance, Stencil::Central, f)
}

pub fn check_with_stencil<F>(
    analytic: &[f64],
    x: &[f64],
    eps: f64,
    tolerance: f64,
    stencil: Stencil,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, u64)>,
{
    let (_, base_sig) = f(x)?;
    let mut report = GradCheckReport {
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance,
        passed: true,
    };
    let mut p = x.to_vec();
    for i in 0..x.len() {
        let offsets: &[f64] = match stencil {
            Stencil::Central => &[1.0, -1.0],
            Stencil::FivePoint => &[1.0, -1.0, 2.0, -2.0],
        };
        let mut vals = [0.0; 4];
        let mut crossed = false;
        for (v, &o) in vals.iter_mut().zip(offsets) {
            p[i] = x[i] + o * eps;
            let (l, sig) = f(&p)?;
            *v = l;
            crossed |= sig != base_sig;
        }
        p[i] = x[i];
        if crossed {
            report.skipped += 1;
            continue;
        }
        let fd = match stencil {
            Stencil::Central => (vals[0] - vals[1]) / (2.0 * eps),
            Stencil::FivePoint => (8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * eps),
        };
        let err = relative_error(fd, analytic[i], REL_FLOOR);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(i);
        }
    }
    report.passed = report.checked > 0 && report.max_rel_error <= tolerance;
    Ok(report)
}

/// Reports for the parameter gradient and, when the model has memory, the
/// gradient with respect to the starting memory contents.
#[derive(Debug, Clone, Serialize)]
pub struct FullReport {
    pub params: GradCheckReport,
    pub memory: Option<GradCheckReport>,
}

impl FullReport {
    pub fn passed(&self) -> bool {
        self.params.passed && self.memory.as_ref().is_none_or(|m| m.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .max_rel_error
            .max(self.memory.as_ref().map_or(0.0, |m| m.max_rel_error))
    }
}

/// Checks every parameter and every starting-memory entry of `model` on
/// `ep`. Linkage weightings are held at their unperturbed values, matching
/// the stop-gradient through the link matrices.
pub fn gradient_check(
    model: &Model,
    params: &[f64],
    start_memory: Option<&DenseMatrix>,
    ep: &Episode,
    eps: f64,
    tolerance: f64,
) -> Result<FullReport> {
    gradient_check_with(model, params, start_memory, ep, eps, tolerance, Stencil::Central)
}

pub fn gradient_check_with(
    model: &Model,
    params: &[f64],
    start_memory: Option<&DenseMatrix>,
    ep: &Episode,
    eps: f64,
    tolerance: f64,
    stencil: Stencil,
) -> Result<FullReport> {
    let fresh = |mem: Option<&DenseMatrix>| -> Result<Replica> {
        match mem {
            Some(m) => model.replica_with_memory(m.clone()),
            None => model.new_replica(),
        }
    };
    let base = model.run_episode(params, &mut fresh(start_memory)?, ep)?;
    let linked = model.config().kind.has_linkage();
    let eval = |p: &[f64], mem: Option<&DenseMatrix>| -> Result<(f64, u64)> {
        let mut rep = fresh(mem)?;
        let out = if linked {
            model.evaluate_frozen_links(p, &mut rep, ep, &base.directional)?
        } else {
            model.evaluate(p, &mut rep, ep)?
        };
        Ok((out.loss, out.signature))
    };
    let params_report = check_with_stencil(&base.grads, params, eps, tolerance, stencil, |p| eval(p, start_memory))?;
    let memory = match (&base.d_memory, model.config().kind.has_memory()) {
        (Some(dm), true) => {
            let m0 = match start_memory {
                Some(m) => m.clone(),
                None => fresh(None)?.memory().expect("memory model").memory().clone(),
            };
            let analytic = dm.to_dense();
            let (rows, cols) = (m0.rows(), m0.cols());
            Some(check_with_stencil(analytic.data(), m0.data(), eps, tolerance, stencil, |x| {
                let m = DenseMatrix::from_vec(rows, cols, x.to_vec())?;
                eval(params, Some(&m))
            })?)
        }
        _ => None,
    };
    Ok(FullReport {
        params: params_report,
        memory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelKind};
    use crate::tasks::{generate, TaskConfig, TaskKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(kind: ModelKind, n: usize) -> Model {
        Model::new(ModelConfig {
            kind,
            input_size: 9,
            output_size: 8,
            hidden: 8,
            slots: n,
            word_size: 8,
            heads: 1,
            k: 4,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn copy_episode(level: usize) -> Episode {
        generate(&TaskConfig::new(TaskKind::Copy, level, 3)).unwrap()
    }

    #[test]
    fn lstm_only_passes_tightly() {
        let m = model(ModelKind::Lstm, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params: Vec<f64> = (0..m.num_params()).map(|_| rng.random_range(-0.5..0.5)).collect();
        // at ε = 1e-5 cancellation in a loss of ~5 nats costs ~1e-10 absolute,
        // so take a wider step with a higher-order stencil
        let r = gradient_check_with(&m, &params, None, &copy_episode(2), 1e-3, 1e-7, Stencil::FivePoint).unwrap();
        assert!(r.passed(), "{:?}", r.params);
        assert_eq!(r.params.skipped, 0);
        assert!(r.memory.is_none());
    }

    #[test]
    fn trivial_copy_sample() {
        // level 1 copy runs three steps
        let m = model(ModelKind::SamExact, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = m.init_params(&mut rng);
        let ep = copy_episode(1);
        let r = gradient_check(&m, &params, None, &ep, 1e-5, 1e-5).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn sam_with_prefilled_memory() {
        let m = model(ModelKind::SamExact, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params: Vec<f64> = (0..m.num_params()).map(|_| rng.random_range(-0.4..0.4)).collect();
        let rows: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mem = DenseMatrix::from_rows(&rows).unwrap();
        let r = gradient_check(&m, &params, Some(&mem), &copy_episode(2), 1e-5, 1e-5).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.memory.as_ref().unwrap().checked > 100);
    }

    #[test]
    fn sign_flip_is_caught() {
        let m = model(ModelKind::SamExact, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params: Vec<f64> = (0..m.num_params()).map(|_| rng.random_range(-0.4..0.4)).collect();
        let ep = copy_episode(2);
        let out = m.run_episode(&params, &mut m.new_replica().unwrap(), &ep).unwrap();
        let flipped: Vec<f64> = out.grads.iter().map(|g| -g).collect();
        let r = check_with(&flipped, &params, 1e-5, 1e-5, |p| {
            let o = m.evaluate(p, &mut m.new_replica().unwrap(), &ep)?;
            Ok((o.loss, o.signature))
        })
        .unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 1.0);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-4), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-4) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-4) - 1e-5).abs() < 1e-15);
    }
}
