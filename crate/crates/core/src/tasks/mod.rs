//! Analytic simulators and dataset handling.
//!
//! Every task is a controlled Markov system `x' ~ p(·|x, u)`, `y ~ p(·|x, u)`
//! with a prior over `x₀` and a random control policy. Known densities are
//! exposed so the numeric oracles in [`crate::eval`] can run against them.

mod bearings;
mod bimodal;
mod conditional;
mod dataset;
mod linear;
mod norm;
mod spin;

pub use bearings::{BearingsOnly, BearingsOnlyParams};
pub use bimodal::{AbsBimodal, AbsBimodalParams};
pub use conditional::GaussianConditional;
pub use dataset::{
    compute_stats, generate_dataset, load_dataset, read_manifest, read_rollout, simulate_rollout, simulate_rollouts, write_rollout,
    Dataset,
    DatasetManifest, RolloutRecord, MANIFEST_FORMAT, ROLLOUT_FORMAT,
};
pub use linear::{LinearGaussian, LinearGaussianParams, LinearModel};
pub use norm::{DimStats, NormStats};
pub use spin::{SpinContact, SpinContactParams};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: std::path::PathBuf, message: String },
    #[error("invalid task: {0}")]
    Invalid(String),
}

/// Probability that an observation is available at a timestep, for the
/// in-distribution and out-of-distribution blackout evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlackoutPreset {
    InDistribution,
    OutOfDistribution,
}

impl BlackoutPreset {
    pub fn availability(self) -> f64 {
        match self {
            BlackoutPreset::InDistribution => 0.2,
            BlackoutPreset::OutOfDistribution => 0.02,
        }
    }
}

/// A controlled stochastic system with a measurement model.
pub trait Task: Send + Sync {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn ctrl_dim(&self) -> usize;

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64>;

    /// Control in effect at `t = 0`, before the first transition.
    fn initial_control(&self, _x0: &[f64]) -> Vec<f64> {
        vec![0.0; self.ctrl_dim()]
    }

    /// Control `u_t` applied on the transition `x_{t-1} → x_t`.
    fn sample_control(&self, t: usize, x_prev: &[f64], u_prev: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;

    /// Transition with process noise drawn from `rng`.
    fn step(&self, x: &[f64], u: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;

    /// Measurement of `x` (with control `u` in effect) with noise drawn from `rng`.
    fn observe(&self, x: &[f64], u: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;

    /// Probability that `y_t` is available for `t ≥ 1`.
    fn obs_availability(&self) -> f64;

    fn transition_log_density(&self, _x_next: &[f64], _x: &[f64], _u: &[f64]) -> Option<f64> {
        None
    }

    fn measurement_log_density(&self, _y: &[f64], _x: &[f64], _u: &[f64]) -> Option<f64> {
        None
    }

    fn prior_log_density(&self, _x: &[f64]) -> Option<f64> {
        None
    }

    /// Matrices of a linear-Gaussian task.
    fn linear_model(&self) -> Option<LinearModel> {
        None
    }
}

/// Serializable task selection with parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum TaskSpec {
    LinearGaussian(LinearGaussianParams),
    AbsBimodal(AbsBimodalParams),
    BearingsOnly(BearingsOnlyParams),
    SpinContact(SpinContactParams),
}

impl TaskSpec {
    pub fn build(&self) -> Result<Box<dyn Task>, TaskError> {
        Ok(match self {
            TaskSpec::LinearGaussian(p) => Box::new(LinearGaussian::new(p.clone())?),
            TaskSpec::AbsBimodal(p) => Box::new(AbsBimodal::new(p.clone())?),
            TaskSpec::BearingsOnly(p) => Box::new(BearingsOnly::new(p.clone())?),
            TaskSpec::SpinContact(p) => Box::new(SpinContact::new(p.clone())?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::LinearGaussian(_) => "linear-gaussian",
            TaskSpec::AbsBimodal(_) => "abs-bimodal",
            TaskSpec::BearingsOnly(_) => "bearings-only",
            TaskSpec::SpinContact(_) => "spin-contact",
        }
    }

    pub fn set_obs_availability(&mut self, p: f64) {
        match self {
            TaskSpec::LinearGaussian(t) => t.obs_availability = p,
            TaskSpec::AbsBimodal(t) => t.obs_availability = p,
            TaskSpec::BearingsOnly(t) => t.obs_availability = p,
            TaskSpec::SpinContact(t) => t.obs_availability = p,
        }
    }
}

pub(crate) fn check_prob(p: f64, what: &str) -> Result<(), TaskError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(TaskError::Invalid(format!("{what} = {p} is not a probability")))
    }
}

pub(crate) fn check_scale(v: f64, what: &str) -> Result<(), TaskError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(TaskError::Invalid(format!("{what} = {v} must be a non-negative scale")))
    }
}

pub(crate) fn gauss(rng: &mut dyn RngCore) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}

pub(crate) fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean) * (x - mean) / var + (2.0 * std::f64::consts::PI * var).ln())
}
