//! Dense network stack: forward evaluation, reverse-mode gradients, Adam and EMA.

pub mod gemm;
mod net;
mod optim;
mod params;
mod spec;

pub use net::{backward, forward, forward_batch, forward_tape, value_and_grad, Film, FilmVector, Gradients, Tape};
pub use optim::{clip_global_norm, ema_update, half_sq_norm, Adam};
pub use params::{ParamBlock, ParamKind, ParamSet, PARAMS_FORMAT, PARAMS_VERSION};
pub use spec::{Activation, DenseNetSpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite value in layer {layer} (element {index})")]
    NonFinite { layer: usize, index: usize },
    #[error("non-finite gradient at index {index}")]
    NonFiniteGradient { index: usize },
    #[error("parameter layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Number of sinusoidal features used to embed a noise scale.
pub const EMBED_DIM: usize = 16;

/// Sinusoidal embedding of `s ∈ [0, 1]` at geometric frequencies `2^k`, `k = 0..8`.
pub fn noise_embedding(s: f64) -> [f64; EMBED_DIM] {
    let mut out = [0.0; EMBED_DIM];
    for k in 0..EMBED_DIM / 2 {
        let arg = s * f64::powi(2.0, k as i32);
        out[2 * k] = arg.sin();
        out[2 * k + 1] = arg.cos();
    }
    out
}

/// A network spec together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: DenseNetSpec,
    pub params: ParamSet,
}

impl Network {
    pub fn new<R: rand::Rng + ?Sized>(spec: DenseNetSpec, rng: &mut R, zero_output: bool) -> Result<Self, NnError> {
        spec.validate()?;
        let params = ParamSet::init(&spec, rng, zero_output);
        Ok(Network { spec, params })
    }

    pub fn forward(&self, input: &[f64], film: Option<&FilmVector>) -> Result<Vec<f64>, NnError> {
        forward(&self.spec, &self.params, input, film)
    }

    pub fn forward_batch(&self, inputs: &[f64], batch: usize, film: Film<'_>) -> Result<Vec<f64>, NnError> {
        forward_batch(&self.spec, &self.params, inputs, batch, film)
    }
}
