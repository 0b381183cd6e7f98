//! Observation encoder, FiLM generator, denoiser and Gaussian dynamics model,
//! their training objectives, and closed-form reference models.

mod analytic;
mod bundle;
mod io;
mod loss;
mod train;

pub use analytic::{AnalyticContext, GaussianScores};
pub use bundle::{ArchConfig, BundleParams, LearnedContext, LearnedModel, ModelBundle};
pub use io::{load_bundle, save_bundle, BUNDLE_FORMAT};
pub use loss::{dsm_loss, dsm_loss_with_noise, dynamics_nll_loss, DsmGrads, DsmNoise, TransitionBatch};
pub use train::{train, StageReport, TrainConfig, TrainReport};

use crate::diffusion::{DiffusionError, GaussianDynOut};
use crate::nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("training diverged in {stage} at step {step}: loss = {loss}")]
    Diverged { stage: &'static str, step: usize, loss: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: std::path::PathBuf, message: String },
}

/// Which score a noise prediction targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// `p(x | y_t, y_prev)`
    Conditional,
    /// `p(x)`
    Unconditional,
}

/// Measurement and dynamics scores in normalized units, as used by the filter.
///
/// `prepare` is called once per timestep and may precompute anything that
/// depends only on the observation and the noise levels.
pub trait ScoreModel: Sync {
    type Context: Sync;

    fn state_dim(&self) -> usize;

    fn predict_dynamics(&self, x_prev: &[f64], u: &[f64]) -> Result<GaussianDynOut, ModelError>;

    /// `obs` is `(y_t, y_prev)` when an observation is available.
    fn prepare(&self, obs: Option<(&[f64], &[f64])>, levels: &[f64]) -> Result<Self::Context, ModelError>;

    /// Noise predictions for `batch` row-major states at `levels[level]`,
    /// written to `out` (`batch × state_dim`).
    fn predict_noise(
        &self,
        ctx: &Self::Context,
        level: usize,
        mode: NoiseMode,
        x_s: &[f64],
        batch: usize,
        out: &mut [f64],
    ) -> Result<(), ModelError>;
}
