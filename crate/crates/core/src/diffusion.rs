//! Noise schedule, Gaussian perturbation, noise/score conversion and the
//! deterministic denoising integrator.
//!
//! Noise scales run from `s = 0` (pure noise) to `s = 1` (clean data) with
//! `x_s = α_s x + β_s ε`, `α_s = √ᾱ_s`, `β_s = √(1 − ᾱ_s)` and the
//! sine-squared curve `ᾱ_s = sin²(sπ/2)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// First level used when integrating from pure noise; `α_0 = 0` makes the
/// clean-point estimate undefined at `s = 0` itself.
pub const START_LEVEL: f64 = 1e-3;

/// Below this `α_s` the clean-point estimate is clamped to zero.
pub const ALPHA_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("noise scale {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("score undefined at s = {0} (β_s = 0)")]
    ZeroNoise(f64),
    #[error("invalid step from s = {from} to s = {to}")]
    BadStep { from: f64, to: f64 },
    #[error("non-finite value while denoising from s = {from} to s = {to}")]
    NonFinite { from: f64, to: f64 },
    #[error("perturbed covariance not positive in dimension {dim}")]
    NonPositiveCovariance { dim: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleCurve {
    SineSquared,
}

/// Uniform grid of `steps + 1` noise levels on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub curve: ScheduleCurve,
}

impl NoiseSchedule {
    pub fn new(steps: usize) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::InvalidSchedule("need at least one step".into()));
        }
        Ok(NoiseSchedule {
            steps,
            curve: ScheduleCurve::SineSquared,
        })
    }

    pub fn alpha_bar(&self, s: f64) -> f64 {
        match self.curve {
            ScheduleCurve::SineSquared => {
                let a = (s * std::f64::consts::FRAC_PI_2).sin();
                a * a
            }
        }
    }

    /// `(α_s, β_s)` with `α_s² + β_s² = 1`.
    pub fn alpha_beta(&self, s: f64) -> Result<(f64, f64), DiffusionError> {
        if !(0.0..=1.0).contains(&s) {
            return Err(DiffusionError::OutOfRange(s));
        }
        let ab = self.alpha_bar(s).clamp(0.0, 1.0);
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| k as f64 / self.steps as f64).collect()
    }

    /// Levels `s_w, …, 1` for a warm-started run: `round(steps·(1 − s_w))`
    /// uniform steps (at least one). A start at `s < START_LEVEL` is moved to
    /// `START_LEVEL`.
    pub fn warm_start_levels(&self, s_w: f64) -> Result<Vec<f64>, DiffusionError> {
        if !(0.0..1.0).contains(&s_w) {
            return Err(DiffusionError::OutOfRange(s_w));
        }
        let n = ((self.steps as f64 * (1.0 - s_w)).round() as usize).max(1);
        let mut levels: Vec<f64> = (0..=n).map(|j| s_w + (1.0 - s_w) * j as f64 / n as f64).collect();
        levels[n] = 1.0;
        if levels[0] < START_LEVEL {
            levels[0] = START_LEVEL;
        }
        Ok(levels)
    }
}

/// `α_s x + β_s ε`
pub fn perturb(schedule: &NoiseSchedule, x: &[f64], s: f64, eps: &[f64]) -> Result<Vec<f64>, DiffusionError> {
    if x.len() != eps.len() {
        return Err(DiffusionError::Dimension("state and noise differ in length".into()));
    }
    let (a, b) = schedule.alpha_beta(s)?;
    Ok(x.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Score of the perturbed density implied by a noise prediction: `−ε̂/β_s`.
pub fn noise_to_score(schedule: &NoiseSchedule, eps_hat: &[f64], s: f64) -> Result<Vec<f64>, DiffusionError> {
    let (_, b) = schedule.alpha_beta(s)?;
    if b <= 0.0 {
        return Err(DiffusionError::ZeroNoise(s));
    }
    Ok(eps_hat.iter().map(|e| -e / b).collect())
}

/// One deterministic DDIM step from `s` to `s_next`, in place.
///
/// `x̂₁ = (x − β_s ε̂)/α_s` and `x ← α_{s'} x̂₁ + β_{s'} ε̂`; for `α_s ≤ ALPHA_TOL`
/// the clean-point estimate is clamped to zero.
pub fn denoise_step_in_place(
    schedule: &NoiseSchedule,
    x: &mut [f64],
    eps_hat: &[f64],
    s: f64,
    s_next: f64,
) -> Result<(), DiffusionError> {
    if !(s < s_next) {
        return Err(DiffusionError::BadStep { from: s, to: s_next });
    }
    if x.len() != eps_hat.len() {
        return Err(DiffusionError::Dimension("state and noise differ in length".into()));
    }
    let (a, b) = schedule.alpha_beta(s)?;
    let (a2, b2) = schedule.alpha_beta(s_next)?;
    for (xi, &e) in x.iter_mut().zip(eps_hat) {
        let clean = if a > ALPHA_TOL { (*xi - b * e) / a } else { 0.0 };
        *xi = a2 * clean + b2 * e;
        if !xi.is_finite() {
            return Err(DiffusionError::NonFinite { from: s, to: s_next });
        }
    }
    Ok(())
}

pub fn denoise_step(
    schedule: &NoiseSchedule,
    x: &[f64],
    eps_hat: &[f64],
    s: f64,
    s_next: f64,
) -> Result<Vec<f64>, DiffusionError> {
    let mut out = x.to_vec();
    denoise_step_in_place(schedule, &mut out, eps_hat, s, s_next)?;
    Ok(out)
}

/// Gaussian one-step prediction `N(μ_f, diag(Σ_f))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDynOut {
    pub mean: Vec<f64>,
    /// Per-dimension variance.
    pub var: Vec<f64>,
}

impl GaussianDynOut {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.mean.len() != self.var.len() {
            return Err(DiffusionError::Dimension("mean and variance differ in length".into()));
        }
        if let Some(dim) = self.var.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(DiffusionError::NonPositiveCovariance { dim });
        }
        Ok(())
    }
}

/// Noise implied by the perturbed Gaussian transition:
/// `ε_dy = −β_s ∇ log N(x_s; α_s μ_f, α_s² Σ_f + β_s² I) = β_s Σ_s⁻¹ (x_s − α_s μ_f)`.
pub fn gaussian_perturbed_noise_into(
    schedule: &NoiseSchedule,
    dyn_out: &GaussianDynOut,
    x_s: &[f64],
    s: f64,
    out: &mut [f64],
) -> Result<(), DiffusionError> {
    if x_s.len() != dyn_out.mean.len() || out.len() != x_s.len() {
        return Err(DiffusionError::Dimension("state and prediction differ in length".into()));
    }
    let (a, b) = schedule.alpha_beta(s)?;
    for j in 0..x_s.len() {
        let cov = a * a * dyn_out.var[j] + b * b;
        if !(cov > 0.0) {
            return Err(DiffusionError::NonPositiveCovariance { dim: j });
        }
        out[j] = b * (x_s[j] - a * dyn_out.mean[j]) / cov;
    }
    Ok(())
}

pub fn gaussian_perturbed_noise(
    schedule: &NoiseSchedule,
    dyn_out: &GaussianDynOut,
    x_s: &[f64],
    s: f64,
) -> Result<Vec<f64>, DiffusionError> {
    let mut out = vec![0.0; x_s.len()];
    gaussian_perturbed_noise_into(schedule, dyn_out, x_s, s, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(50).unwrap()
    }

    /// A schedule value `ᾱ` expressed as the level `s` that produces it.
    fn level_for(alpha_bar: f64) -> f64 {
        alpha_bar.sqrt().asin() / std::f64::consts::FRAC_PI_2
    }

    #[test]
    fn boundaries_and_midpoint() {
        let s = sched();
        assert_eq!(s.alpha_beta(0.0).unwrap(), (0.0, 1.0));
        assert_eq!(s.alpha_beta(1.0).unwrap(), (1.0, 0.0));
        let (a, b) = s.alpha_beta(0.5).unwrap();
        assert!((a - 0.5f64.sqrt()).abs() < 1e-15 && (b - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.alpha_beta(1.5), Err(DiffusionError::OutOfRange(1.5)));
        assert!(s.alpha_beta(-0.1).is_err());
    }

    #[test]
    fn grid_is_monotone() {
        let s = sched();
        let ab: Vec<_> = s.grid().iter().map(|&g| s.alpha_beta(g).unwrap()).collect();
        for w in ab.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 <= w[0].1);
        }
    }

    #[test]
    fn warm_start_levels_count() {
        let s = NoiseSchedule::new(20).unwrap();
        let l = s.warm_start_levels(0.5).unwrap();
        assert_eq!(l.len(), 11);
        assert_eq!(l[0], 0.5);
        assert_eq!(*l.last().unwrap(), 1.0);
        let full = s.warm_start_levels(0.0).unwrap();
        assert_eq!(full.len(), 21);
        assert_eq!(full[0], START_LEVEL);
        assert_eq!(s.warm_start_levels(0.999).unwrap().len(), 2);
        assert!(s.warm_start_levels(1.0).is_err());
    }

    #[test]
    fn perturb_cases() {
        let s = sched();
        assert_eq!(perturb(&s, &[2.0], 1.0, &[-1.0]).unwrap(), vec![2.0]);
        assert_eq!(perturb(&s, &[2.0], 0.0, &[-1.0]).unwrap(), vec![-1.0]);
        let v = perturb(&s, &[2.0], level_for(0.25), &[-1.0]).unwrap()[0];
        assert!((v - (1.0 - 0.75f64.sqrt())).abs() < 1e-12, "{v}");
        assert!((v - 0.1340).abs() < 1e-4);
    }

    #[test]
    fn noise_to_score_cases() {
        let s = sched();
        let lvl = level_for(0.75); // β = 0.5
        assert_eq!(noise_to_score(&s, &[0.0], lvl).unwrap(), vec![-0.0]);
        let v = noise_to_score(&s, &[0.5], lvl).unwrap()[0];
        assert!((v + 1.0).abs() < 1e-12);
        let w = noise_to_score(&s, &[-0.5], lvl).unwrap()[0];
        assert_eq!(w, -v);
        assert_eq!(noise_to_score(&s, &[0.5], 1.0), Err(DiffusionError::ZeroNoise(1.0)));
    }

    #[test]
    fn denoise_step_hand_evaluation() {
        let s = sched();
        let (l1, l2) = (level_for(0.25), level_for(0.64));
        let out = denoise_step(&s, &[1.0], &[0.5], l1, l2).unwrap()[0];
        let clean = (1.0 - 0.75f64.sqrt() * 0.5) / 0.5;
        assert!((clean - 1.1340).abs() < 1e-4);
        assert!((out - (0.8 * clean + 0.6 * 0.5)).abs() < 1e-12);
        assert!((out - 1.2072).abs() < 1e-4);
    }

    #[test]
    fn denoise_step_with_true_noise_is_consistent() {
        let s = sched();
        let (x, e) = (0.7, -1.3);
        let xs = perturb(&s, &[x], 0.3, &[e]).unwrap();
        let next = denoise_step(&s, &xs, &[e], 0.3, 0.8).unwrap();
        let expected = perturb(&s, &[x], 0.8, &[e]).unwrap();
        assert!((next[0] - expected[0]).abs() < 1e-12);
        let clean = denoise_step(&s, &xs, &[e], 0.3, 1.0).unwrap();
        assert!((clean[0] - x).abs() < 1e-12);
    }

    #[test]
    fn denoise_step_rejects_backwards() {
        let s = sched();
        assert!(matches!(denoise_step(&s, &[0.0], &[0.0], 0.5, 0.5), Err(DiffusionError::BadStep { .. })));
    }

    #[test]
    fn alpha_zero_clamps_clean_estimate() {
        let s = sched();
        let out = denoise_step(&s, &[3.0], &[0.4], 0.0, 0.5).unwrap()[0];
        let (_, b) = s.alpha_beta(0.5).unwrap();
        assert!((out - b * 0.4).abs() < 1e-15);
    }

    #[test]
    fn gaussian_noise_example_and_mode() {
        let s = sched();
        let lvl = level_for(0.25);
        let d = GaussianDynOut { mean: vec![1.0], var: vec![0.04] };
        let (a, _) = s.alpha_beta(lvl).unwrap();
        assert!(gaussian_perturbed_noise(&s, &d, &[a * 1.0], lvl).unwrap()[0].abs() < 1e-15);
        let v = gaussian_perturbed_noise(&s, &d, &[0.0], lvl).unwrap()[0];
        // −β ∂/∂x log N(x; μ_s, Σ_s) at x = 0 by central differences
        let (a, b) = s.alpha_beta(lvl).unwrap();
        let cov = a * a * 0.04 + b * b;
        let logp = |x: f64| -0.5 * (x - a).powi(2) / cov;
        let h = 1e-5;
        let fd = -b * (logp(h) - logp(-h)) / (2.0 * h);
        assert!((v - fd).abs() < 1e-8);
        assert!((v + 0.5698).abs() < 1e-4, "{v}");
        let at_one = gaussian_perturbed_noise(&s, &d, &[0.3], 1.0).unwrap()[0];
        assert_eq!(at_one, 0.0);
    }
}
