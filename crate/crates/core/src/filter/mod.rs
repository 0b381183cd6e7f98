//! The denoising particle filter.
//!
//! Each timestep propagates every particle through the dynamics model, warm
//! starts a denoising run from the perturbed prediction, and integrates it
//! to `s = 1` using the sum (or constrained combination) of the measurement
//! and dynamics noise predictions. Weights stay uniform.

mod engine;
mod output;
mod sensor;

pub use engine::{
    dnpf_step, filter_rollout, init_particles, FilterInput, PriorSampler, StepDiagnostics, StepRecord, Trajectory,
};
pub use output::{
    read_trajectory, trajectory_lines, write_timing, write_trajectory, TrajectoryFile, TrajectoryHeader, TrajectoryLine,
    TRAJECTORY_FORMAT,
};
pub use sensor::{external_sensor_noise, external_sensor_noise_into, GaussianSensorModel, SensorLevels, ALPHA_MIN};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::DiffusionError;
use crate::models::ModelError;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("invalid inference config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: std::path::PathBuf, message: String },
}

/// Augmented-Lagrangian limit on the likelihood noise magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintConfig {
    pub enabled: bool,
    pub theta: f64,
    pub rho: f64,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        ConstraintConfig {
            enabled: true,
            theta: 2.0,
            rho: 1.0,
        }
    }
}

/// Inference procedure, for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    /// Dynamics and measurement noise combined per timestep.
    Full,
    /// Open-loop sampling from the dynamics model.
    DynamicsOnly,
    /// Dynamics predictions denoised with the unconditional prior noise.
    DynamicsPrior,
    /// Independent sampling from the measurement model at each timestep.
    LikelihoodOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub particles: usize,
    /// Grid size `S_max`.
    pub steps: usize,
    /// Warm start noise scale `s_w ∈ [0, 1)`.
    pub warm_start: f64,
    /// Guidance strength `η ≥ 0`.
    pub guidance: f64,
    pub constraint: ConstraintConfig,
    pub mode: InferenceMode,
    pub seed: u64,
    /// Particles per work unit. Results do not depend on the thread count.
    pub chunk: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            particles: 256,
            steps: 50,
            warm_start: 0.5,
            guidance: 0.0,
            constraint: ConstraintConfig::default(),
            mode: InferenceMode::Full,
            seed: 0,
            chunk: 64,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        let bad = |m: String| Err(FilterError::Config(m));
        if self.particles == 0 {
            return bad("particles must be at least 1".into());
        }
        if self.steps == 0 || self.chunk == 0 {
            return bad("steps and chunk must be positive".into());
        }
        if !(0.0..1.0).contains(&self.warm_start) {
            return bad(format!("warm_start {} outside [0, 1)", self.warm_start));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return bad(format!("guidance {} must be non-negative", self.guidance));
        }
        let c = &self.constraint;
        if !(c.theta > 0.0 && c.theta.is_finite()) || !(c.rho >= 0.0 && c.rho.is_finite()) {
            return bad("constraint needs theta > 0 and rho >= 0".into());
        }
        Ok(())
    }
}

/// `N` particle states with uniform weights and per-dimension multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub dim: usize,
    /// `N × dim` row-major.
    pub states: Vec<f64>,
    pub weights: Vec<f64>,
    /// `N × dim`, non-negative.
    pub lambda: Vec<f64>,
    pub t: usize,
}

impl ParticleSet {
    pub fn from_states(dim: usize, states: Vec<f64>, t: usize) -> Self {
        let n = states.len() / dim;
        ParticleSet {
            dim,
            lambda: vec![0.0; states.len()],
            weights: vec![1.0 / n as f64; n],
            states,
            t,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (row, w) in self.states.chunks_exact(self.dim).zip(&self.weights) {
            for (a, x) in m.iter_mut().zip(row) {
                *a += w * x;
            }
        }
        m
    }

    /// Per-dimension weighted variance.
    pub fn variance(&self) -> Vec<f64> {
        let m = self.mean();
        let mut v = vec![0.0; self.dim];
        for (row, w) in self.states.chunks_exact(self.dim).zip(&self.weights) {
            for j in 0..self.dim {
                v[j] += w * (row[j] - m[j]) * (row[j] - m[j]);
            }
        }
        v
    }
}

/// Guided measurement noise `(1 + η) ε_cond − η ε_uncond`.
pub fn guided_noise(eps_cond: &[f64], eps_uncond: &[f64], eta: f64, out: &mut [f64]) {
    for ((o, c), u) in out.iter_mut().zip(eps_cond).zip(eps_uncond) {
        *o = (1.0 + eta) * c - eta * u;
    }
}

/// Per-dimension constrained combination. With `c_j = |ε_lh,j| − θ`:
/// `ε_j = ε_lh,j + ε_dy,j / (1 + λ_j + ρ max(0, c_j))`, then
/// `λ_j ← max(0, λ_j + ρ c_j)`.
pub fn constrained_combine(
    eps_lh: &[f64],
    eps_dy: &[f64],
    lambda: &mut [f64],
    theta: f64,
    rho: f64,
    out: &mut [f64],
) {
    for j in 0..out.len() {
        let c = eps_lh[j].abs() - theta;
        out[j] = eps_lh[j] + eps_dy[j] / (1.0 + lambda[j] + rho * c.max(0.0));
        lambda[j] = (lambda[j] + rho * c).max(0.0);
    }
}
