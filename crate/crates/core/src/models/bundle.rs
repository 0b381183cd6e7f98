use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelError, NoiseMode, ScoreModel};
use crate::diffusion::GaussianDynOut;
use crate::nn::{forward_batch, noise_embedding, Activation, DenseNetSpec, Film, FilmVector, ParamSet, EMBED_DIM};
use crate::tasks::NormStats;

pub(crate) const LOGVAR_MIN: f64 = -10.0;
pub(crate) const LOGVAR_MAX: f64 = 4.0;

/// Network sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub encoder_hidden: Vec<usize>,
    pub encoder_dim: usize,
    pub film_hidden: Vec<usize>,
    pub denoiser_hidden: Vec<usize>,
    pub dynamics_hidden: Vec<usize>,
    pub activation: Activation,
    pub layer_norm: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            encoder_hidden: vec![64],
            encoder_dim: 32,
            film_hidden: vec![64, 64],
            denoiser_hidden: vec![64, 64, 64],
            dynamics_hidden: vec![64, 64],
            activation: Activation::SmoothGated,
            layer_norm: true,
        }
    }
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

impl ArchConfig {
    fn spec(&self, w: Vec<usize>) -> DenseNetSpec {
        let mut s = DenseNetSpec::new(w);
        s.activation = self.activation;
        s.use_layer_norm = self.layer_norm;
        s
    }

    pub fn encoder_spec(&self, dy: usize) -> DenseNetSpec {
        self.spec(widths(2 * dy, &self.encoder_hidden, self.encoder_dim))
    }

    pub fn denoiser_spec(&self, dx: usize) -> DenseNetSpec {
        self.spec(widths(dx + EMBED_DIM, &self.denoiser_hidden, dx))
            .with_film_on_all_hidden()
    }

    pub fn film_spec(&self, dx: usize) -> DenseNetSpec {
        let film_len = self.denoiser_spec(dx).film_len();
        self.spec(widths(self.encoder_dim + EMBED_DIM, &self.film_hidden, film_len))
    }

    pub fn dynamics_spec(&self, dx: usize, du: usize) -> DenseNetSpec {
        self.spec(widths(dx + du, &self.dynamics_hidden, 2 * dx))
    }
}

/// Parameters of all networks plus the learned null conditioning token.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleParams {
    pub encoder: ParamSet,
    pub film: ParamSet,
    pub denoiser: ParamSet,
    pub dynamics: ParamSet,
    pub null_token: Vec<f64>,
}

impl BundleParams {
    pub fn check(&self) -> Result<(), ModelError> {
        self.encoder.check()?;
        self.film.check()?;
        self.denoiser.check()?;
        self.dynamics.check()?;
        if self.null_token.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Invalid("non-finite null token".into()));
        }
        Ok(())
    }
}

/// Encoder `E`, FiLM generator `F`, denoiser `D`, dynamics `f`, their EMA
/// shadows and the normalization statistics of the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub arch: ArchConfig,
    pub dx: usize,
    pub dy: usize,
    pub du: usize,
    pub stats: NormStats,
    pub encoder_spec: DenseNetSpec,
    pub film_spec: DenseNetSpec,
    pub denoiser_spec: DenseNetSpec,
    pub dynamics_spec: DenseNetSpec,
    pub params: BundleParams,
    pub ema: BundleParams,
    pub provenance: serde_json::Value,
}

impl ModelBundle {
    /// Fresh bundle. `F`, `D` and `f` start with zero output layers, so the
    /// untrained model predicts zero noise, identity FiLM and identity dynamics
    /// with unit variance.
    pub fn new(arch: ArchConfig, stats: NormStats, seed: u64) -> Result<Self, ModelError> {
        if !stats.is_valid() {
            return Err(ModelError::Invalid("normalization statistics must have positive spread".into()));
        }
        let (dx, dy, du) = (stats.x.dim(), stats.y.dim(), stats.u.dim());
        let encoder_spec = arch.encoder_spec(dy);
        let film_spec = arch.film_spec(dx);
        let denoiser_spec = arch.denoiser_spec(dx);
        let dynamics_spec = arch.dynamics_spec(dx, du);
        for s in [&encoder_spec, &film_spec, &denoiser_spec, &dynamics_spec] {
            s.validate()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = BundleParams {
            encoder: ParamSet::init(&encoder_spec, &mut rng, false),
            film: ParamSet::init(&film_spec, &mut rng, true),
            denoiser: ParamSet::init(&denoiser_spec, &mut rng, true),
            dynamics: ParamSet::init(&dynamics_spec, &mut rng, true),
            null_token: vec![0.0; arch.encoder_dim],
        };
        Ok(ModelBundle {
            arch,
            dx,
            dy,
            du,
            stats,
            encoder_spec,
            film_spec,
            denoiser_spec,
            dynamics_spec,
            ema: params.clone(),
            params,
            provenance: serde_json::Value::Null,
        })
    }

    /// Inference view on the EMA (`use_ema`) or raw parameters.
    pub fn model(&self, use_ema: bool) -> LearnedModel<'_> {
        LearnedModel {
            bundle: self,
            params: if use_ema { &self.ema } else { &self.params },
        }
    }

    pub fn film_widths(&self) -> Vec<usize> {
        self.denoiser_spec.film_widths()
    }
}

/// Turn raw `F` outputs into FiLM vectors by adding 1 to every `γ` entry.
pub(crate) fn raw_to_film(raw: &mut [f64], widths: &[usize]) {
    let mut off = 0;
    for &w in widths {
        for g in &mut raw[off..off + w] {
            *g += 1.0;
        }
        off += 2 * w;
    }
}

/// A [`ModelBundle`] with a chosen parameter set.
#[derive(Debug, Clone, Copy)]
pub struct LearnedModel<'a> {
    pub bundle: &'a ModelBundle,
    pub params: &'a BundleParams,
}

/// Per-timestep precomputation: one FiLM vector per noise level.
#[derive(Debug, Clone)]
pub struct LearnedContext {
    pub levels: Vec<f64>,
    pub cond: Option<Vec<FilmVector>>,
    pub uncond: Vec<FilmVector>,
}

impl LearnedModel<'_> {
    /// Shared observation encoding `E(y_t, y_prev)`.
    pub fn encode_observation(&self, y_t: &[f64], y_prev: &[f64]) -> Result<Vec<f64>, ModelError> {
        let b = self.bundle;
        if y_t.len() != b.dy || y_prev.len() != b.dy {
            return Err(ModelError::Dimension(format!(
                "observation pair has lengths {}/{}, expected {}",
                y_t.len(),
                y_prev.len(),
                b.dy
            )));
        }
        let mut input = y_t.to_vec();
        input.extend_from_slice(y_prev);
        Ok(forward_batch(&b.encoder_spec, &self.params.encoder, &input, 1, Film::None)?)
    }

    /// FiLM vectors for each noise level, from an encoding or the null token.
    pub fn film_vectors(&self, y_enc: Option<&[f64]>, levels: &[f64]) -> Result<Vec<FilmVector>, ModelError> {
        if levels.is_empty() {
            return Err(ModelError::Invalid("no noise levels given".into()));
        }
        if let Some(s) = levels.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(ModelError::Invalid(format!("noise level {s} outside [0, 1]")));
        }
        let b = self.bundle;
        let token = y_enc.unwrap_or(&self.params.null_token);
        if token.len() != b.arch.encoder_dim {
            return Err(ModelError::Dimension("encoding width".into()));
        }
        let width = b.arch.encoder_dim + EMBED_DIM;
        let mut input = Vec::with_capacity(levels.len() * width);
        for &s in levels {
            input.extend_from_slice(token);
            input.extend_from_slice(&noise_embedding(s));
        }
        let mut raw = forward_batch(&b.film_spec, &self.params.film, &input, levels.len(), Film::None)?;
        let widths = b.film_widths();
        let len = b.film_spec.output_width();
        Ok(raw
            .chunks_mut(len)
            .map(|r| {
                raw_to_film(r, &widths);
                FilmVector {
                    data: r.to_vec(),
                    widths: widths.clone(),
                }
            })
            .collect())
    }

    /// `D(x_s, s)` under the given FiLM vector (`None` uses the null token).
    pub fn denoiser_predict(&self, x_s: &[f64], film: Option<&FilmVector>, s: f64) -> Result<Vec<f64>, ModelError> {
        let owned;
        let film = match film {
            Some(f) => f,
            None => {
                owned = self.film_vectors(None, &[s])?.remove(0);
                &owned
            }
        };
        let mut out = vec![0.0; self.bundle.dx];
        self.denoise_batch(x_s, 1, s, film, &mut out)?;
        Ok(out)
    }

    fn denoise_batch(&self, x_s: &[f64], batch: usize, s: f64, film: &FilmVector, out: &mut [f64]) -> Result<(), ModelError> {
        let dx = self.bundle.dx;
        if x_s.len() != batch * dx || out.len() != batch * dx {
            return Err(ModelError::Dimension("denoiser batch".into()));
        }
        let emb = noise_embedding(s);
        let mut input = Vec::with_capacity(batch * (dx + EMBED_DIM));
        for row in x_s.chunks_exact(dx) {
            input.extend_from_slice(row);
            input.extend_from_slice(&emb);
        }
        let y = forward_batch(&self.bundle.denoiser_spec, &self.params.denoiser, &input, batch, Film::Shared(film))?;
        out.copy_from_slice(&y);
        Ok(())
    }

    /// `μ_f = x_prev + f_μ`, `Σ_f = exp(f_σ)` with the log-variance clamped.
    pub fn dynamics_predict(&self, x_prev: &[f64], u: &[f64]) -> Result<GaussianDynOut, ModelError> {
        let b = self.bundle;
        if x_prev.len() != b.dx || u.len() != b.du {
            return Err(ModelError::Dimension("dynamics input".into()));
        }
        let mut input = x_prev.to_vec();
        input.extend_from_slice(u);
        let out = forward_batch(&b.dynamics_spec, &self.params.dynamics, &input, 1, Film::None)?;
        let mean = x_prev.iter().zip(&out[..b.dx]).map(|(x, d)| x + d).collect();
        let var = out[b.dx..]
            .iter()
            .map(|lv| lv.clamp(LOGVAR_MIN, LOGVAR_MAX).exp())
            .collect();
        let d = GaussianDynOut { mean, var };
        d.validate()?;
        Ok(d)
    }
}

impl ScoreModel for LearnedModel<'_> {
    type Context = LearnedContext;

    fn state_dim(&self) -> usize {
        self.bundle.dx
    }

    fn predict_dynamics(&self, x_prev: &[f64], u: &[f64]) -> Result<GaussianDynOut, ModelError> {
        self.dynamics_predict(x_prev, u)
    }

    fn prepare(&self, obs: Option<(&[f64], &[f64])>, levels: &[f64]) -> Result<LearnedContext, ModelError> {
        let cond = match obs {
            Some((y, yp)) => {
                let enc = self.encode_observation(y, yp)?;
                Some(self.film_vectors(Some(&enc), levels)?)
            }
            None => None,
        };
        Ok(LearnedContext {
            levels: levels.to_vec(),
            cond,
            uncond: self.film_vectors(None, levels)?,
        })
    }

    fn predict_noise(
        &self,
        ctx: &LearnedContext,
        level: usize,
        mode: NoiseMode,
        x_s: &[f64],
        batch: usize,
        out: &mut [f64],
    ) -> Result<(), ModelError> {
        let film = match (mode, &ctx.cond) {
            (NoiseMode::Conditional, Some(c)) => &c[level],
            (NoiseMode::Conditional, None) => {
                return Err(ModelError::Invalid("conditional noise requested without an observation".into()))
            }
            (NoiseMode::Unconditional, _) => &ctx.uncond[level],
        };
        self.denoise_batch(x_s, batch, ctx.levels[level], film, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::forward;

    fn bundle() -> ModelBundle {
        let arch = ArchConfig {
            encoder_hidden: vec![8],
            encoder_dim: 4,
            film_hidden: vec![8],
            denoiser_hidden: vec![8, 8],
            dynamics_hidden: vec![8],
            ..Default::default()
        };
        ModelBundle::new(arch, NormStats::identity(2, 3, 1), 5).unwrap()
    }

    #[test]
    fn untrained_bundle_is_neutral() {
        let b = bundle();
        let m = b.model(false);
        let films = m.film_vectors(None, &[0.2, 0.7]).unwrap();
        assert_eq!(films.len(), 2);
        for f in &films {
            assert_eq!(f, &FilmVector::identity(&b.film_widths()));
        }
        assert_eq!(m.denoiser_predict(&[0.3, -1.0], None, 0.4).unwrap(), vec![0.0, 0.0]);
        let d = m.dynamics_predict(&[0.3, -1.0], &[2.0]).unwrap();
        assert_eq!(d.mean, vec![0.3, -1.0]);
        assert_eq!(d.var, vec![1.0, 1.0]);
    }

    #[test]
    fn encoder_matches_standalone_forward() {
        let b = bundle();
        let m = b.model(false);
        let (y, yp) = ([0.1, 0.2, 0.3], [-0.5, 0.0, 1.5]);
        let e1 = m.encode_observation(&y, &yp).unwrap();
        let e2 = m.encode_observation(&y, &yp).unwrap();
        assert_eq!(e1, e2);
        let input = [y.as_slice(), yp.as_slice()].concat();
        assert_eq!(e1, forward(&b.encoder_spec, &b.params.encoder, &input, None).unwrap());
    }

    #[test]
    fn zero_encoder_outputs_bias() {
        let mut b = bundle();
        let spec = b.encoder_spec.clone();
        b.params.encoder = ParamSet::zeros(&spec);
        let last = spec.linear_layers() - 1;
        let r = b.params.encoder.block_range(last, crate::nn::ParamKind::Bias).unwrap();
        for (i, v) in b.params.encoder.values[r.clone()].iter_mut().enumerate() {
            *v = i as f64 - 1.5;
        }
        let bias = b.params.encoder.values[r].to_vec();
        let m = b.model(false);
        assert_eq!(m.encode_observation(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap(), bias);
        assert_eq!(m.encode_observation(&[-7.0, 0.0, 9.0], &[1.0; 3]).unwrap(), bias);
    }

    #[test]
    fn empty_level_list_is_rejected() {
        let b = bundle();
        assert!(b.model(false).film_vectors(None, &[]).is_err());
    }
}
