//! Metrics, reference filters and the ablation harness.

mod ablation;
mod bootstrap;
mod grid;
mod kalman;
mod report;

pub use ablation::{run_ablations, sequence_seed, AblationVariant};
pub use bootstrap::{bootstrap_pf, systematic_resample, BootstrapResult};
pub use grid::{grid_filter, GridPosterior, GridSpec};
pub use kalman::{kalman_filter, kalman_for_task, GaussianPosterior};
pub use report::{Component, MetricReport, RuntimeStats, SequenceMetric, Summary};

use thiserror::Error;

use crate::filter::{FilterError, ParticleSet};
use crate::tasks::TaskError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

/// Kernel variance `e⁻³` of the particle mixture.
pub fn default_sigma2() -> f64 {
    (-3.0f64).exp()
}

/// `−log Σᵢ wᵢ N(x_gt; xᵢ, σ² I)` over the selected dimensions, with
/// log-sum-exp stabilization. `states` is `n × dim` row-major; uniform
/// weights when `weights` is `None`.
pub fn gmm_nll_dims(states: &[f64], weights: Option<&[f64]>, dim: usize, dims: &[usize], x_gt: &[f64], sigma2: f64) -> f64 {
    let n = states.len() / dim;
    let d = dims.len() as f64;
    let log_norm = -0.5 * d * (2.0 * std::f64::consts::PI * sigma2).ln();
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let row = &states[i * dim..(i + 1) * dim];
        let sq: f64 = dims.iter().map(|&j| (row[j] - x_gt[j]).powi(2)).sum();
        let lw = match weights {
            Some(w) => w[i].ln(),
            None => -(n as f64).ln(),
        };
        terms.push(lw + log_norm - 0.5 * sq / sigma2);
    }
    -log_sum_exp(&terms)
}

/// [`gmm_nll_dims`] over all dimensions.
pub fn gmm_nll(particles: &ParticleSet, x_gt: &[f64], sigma2: f64) -> f64 {
    let dims: Vec<usize> = (0..particles.dim).collect();
    gmm_nll_dims(&particles.states, Some(&particles.weights), particles.dim, &dims, x_gt, sigma2)
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Sequence metric: per-step NLL averaged over time and divided by the
/// number of dimensions.
pub fn sequence_metric(step_nll: &[f64], dims: usize) -> f64 {
    step_nll.iter().sum::<f64>() / step_nll.len() as f64 / dims as f64
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Interquartile mean: mean after dropping `⌊n/4⌋` values from each end.
pub fn iqm(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "iqm of an empty list");
    let v = sorted(values);
    let k = v.len() / 4;
    let mid = &v[k..v.len() - k];
    mid.iter().sum::<f64>() / mid.len() as f64
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty list");
    quantile_sorted(&sorted(values), q)
}

/// `Q₃ − Q₁` with linear interpolation between order statistics.
pub fn iqr(values: &[f64]) -> f64 {
    let v = sorted(values);
    quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_particle_per_dim() {
        let s2 = default_sigma2();
        let expect = ((2.0 * std::f64::consts::PI).ln() - 3.0) / 2.0;
        for d in [1, 3] {
            let gt: Vec<f64> = (0..d).map(|i| i as f64 * 0.7).collect();
            let p = ParticleSet::from_states(d, gt.clone(), 0);
            assert!((gmm_nll(&p, &gt, s2) / d as f64 - expect).abs() < 1e-12);
            assert!((expect + 0.5811).abs() < 1e-4);
            let mut dup = gt.clone();
            dup.extend(&gt);
            let p2 = ParticleSet::from_states(d, dup, 0);
            assert!((gmm_nll(&p2, &gt, s2) - gmm_nll(&p, &gt, s2)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_symmetric_particles() {
        let s2 = default_sigma2();
        let p = ParticleSet::from_states(1, vec![-1.0, 1.0], 0);
        let expect = 0.5 / s2 + 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
        assert!((gmm_nll(&p, &[0.0], s2) - expect).abs() < 1e-12);
    }

    #[test]
    fn far_particles_do_not_underflow() {
        let p = ParticleSet::from_states(1, vec![100.0, 200.0], 0);
        let v = gmm_nll(&p, &[0.0], default_sigma2());
        assert!(v.is_finite() && v > 1e5);
    }

    #[test]
    fn iqm_fixtures() {
        assert_eq!(iqm(&[5.0]), 5.0);
        assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert_eq!(iqm(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(iqm(&[7.25; 9]), 7.25);
        assert_eq!(iqm(&[100.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, -50.0]), 3.5);
        assert_eq!(iqr(&[1.0, 2.0, 3.0, 4.0, 5.0]), 2.0);
    }

    proptest! {
        #[test]
        fn nll_permutation_invariant(xs in prop::collection::vec(-3f64..3.0, 2..12), gt in -3f64..3.0, k in 0usize..100) {
            let p = ParticleSet::from_states(1, xs.clone(), 0);
            let mut ys = xs.clone();
            ys.rotate_left(k % xs.len());
            let q = ParticleSet::from_states(1, ys, 0);
            let s2 = default_sigma2();
            prop_assert!((gmm_nll(&p, &[gt], s2) - gmm_nll(&q, &[gt], s2)).abs() < 1e-9);
        }

        #[test]
        fn moving_toward_truth_lowers_nll(x in 0.1f64..3.0, f in 0.05f64..0.95) {
            let s2 = default_sigma2();
            let far = ParticleSet::from_states(1, vec![x], 0);
            let near = ParticleSet::from_states(1, vec![x * f], 0);
            prop_assert!(gmm_nll(&near, &[0.0], s2) < gmm_nll(&far, &[0.0], s2));
        }

        #[test]
        fn iqm_within_range(xs in prop::collection::vec(-100f64..100.0, 1..40)) {
            let m = iqm(&xs);
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-9 && m <= hi + 1e-9);
        }
    }
}
