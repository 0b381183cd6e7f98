use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::bundle::{raw_to_film, LOGVAR_MAX, LOGVAR_MIN};
use super::{BundleParams, ModelBundle, ModelError};
use crate::diffusion::NoiseSchedule;
use crate::nn::{backward, forward_batch, forward_tape, noise_embedding, Film, EMBED_DIM};
use crate::tasks::{NormStats, RolloutRecord};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Normalized training rows.
///
/// Dynamics rows are `(x_{t-1}, u_t, x_t)`; denoiser rows are
/// `(x_t, y_t, y_prev, available)`.
#[derive(Debug, Clone, Default)]
pub struct TransitionBatch {
    pub dx: usize,
    pub dy: usize,
    pub du: usize,
    pub dyn_prev: Vec<f64>,
    pub dyn_u: Vec<f64>,
    pub dyn_next: Vec<f64>,
    pub den_x: Vec<f64>,
    pub den_y: Vec<f64>,
    pub den_y_prev: Vec<f64>,
    pub den_obs: Vec<bool>,
}

impl TransitionBatch {
    pub fn new(dx: usize, dy: usize, du: usize) -> Self {
        TransitionBatch {
            dx,
            dy,
            du,
            ..Default::default()
        }
    }

    pub fn from_rollouts(rollouts: &[RolloutRecord], stats: &NormStats) -> Self {
        let mut b = TransitionBatch::new(stats.x.dim(), stats.y.dim(), stats.u.dim());
        for r in rollouts {
            let xs: Vec<Vec<f64>> = r.x.iter().map(|v| stats.x.normalize(v)).collect();
            for t in 0..xs.len() {
                if t >= 1 {
                    b.dyn_prev.extend_from_slice(&xs[t - 1]);
                    b.dyn_u.extend(stats.u.normalize(&r.u[t]));
                    b.dyn_next.extend_from_slice(&xs[t]);
                }
                b.den_x.extend_from_slice(&xs[t]);
                b.den_y.extend(stats.y.normalize(&r.y[t]));
                b.den_y_prev.extend(stats.y.normalize(r.previous_obs(t)));
                b.den_obs.push(r.obs[t]);
            }
        }
        b
    }

    /// Static `(x, y)` pairs with `y_prev = y`.
    pub fn from_pairs(dx: usize, dy: usize, x: &[f64], y: &[f64]) -> Self {
        let mut b = TransitionBatch::new(dx, dy, 0);
        b.den_x = x.to_vec();
        b.den_y = y.to_vec();
        b.den_y_prev = y.to_vec();
        b.den_obs = vec![true; x.len() / dx.max(1)];
        b
    }

    pub fn n_dyn(&self) -> usize {
        self.dyn_next.len() / self.dx.max(1)
    }

    pub fn n_den(&self) -> usize {
        self.den_obs.len()
    }
}

/// Noise draws for a set of denoiser rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmNoise {
    pub s: Vec<f64>,
    pub eps: Vec<f64>,
    /// Whether the row keeps its conditioning.
    pub keep: Vec<bool>,
}

impl DsmNoise {
    /// `s ~ U[0, 1)`, `ε ~ N(0, I)`; conditioning dropped with probability
    /// `p_drop` and always where no observation is available.
    pub fn draw<R: Rng + ?Sized>(batch: &TransitionBatch, rows: &[usize], p_drop: f64, rng: &mut R) -> Self {
        let mut s = Vec::with_capacity(rows.len());
        let mut eps = Vec::with_capacity(rows.len() * batch.dx);
        let mut keep = Vec::with_capacity(rows.len());
        for &r in rows {
            s.push(rng.random::<f64>());
            for _ in 0..batch.dx {
                eps.push(StandardNormal.sample(rng));
            }
            let dropped = rng.random::<f64>() < p_drop;
            keep.push(batch.den_obs[r] && !dropped);
        }
        DsmNoise { s, eps, keep }
    }
}

/// Gradients of the DSM loss.
#[derive(Debug, Clone)]
pub struct DsmGrads {
    pub encoder: Vec<f64>,
    pub film: Vec<f64>,
    pub denoiser: Vec<f64>,
    pub null_token: Vec<f64>,
}

/// Mean over rows of `‖ε − D(α x + β ε, y, s)‖²` for fixed noise draws.
/// Gradients are returned when `with_grad` is set.
pub fn dsm_loss_with_noise(
    bundle: &ModelBundle,
    params: &BundleParams,
    schedule: &NoiseSchedule,
    batch: &TransitionBatch,
    rows: &[usize],
    noise: &DsmNoise,
    with_grad: bool,
) -> Result<(f64, Option<DsmGrads>), ModelError> {
    let n = rows.len();
    if n == 0 {
        return Err(ModelError::Invalid("empty batch".into()));
    }
    let (dx, dy) = (batch.dx, batch.dy);
    let enc_dim = bundle.arch.encoder_dim;

    let mut enc_in = Vec::with_capacity(n * 2 * dy);
    for &r in rows {
        enc_in.extend_from_slice(&batch.den_y[r * dy..(r + 1) * dy]);
        enc_in.extend_from_slice(&batch.den_y_prev[r * dy..(r + 1) * dy]);
    }
    let enc_tape = if with_grad {
        Some(forward_tape(&bundle.encoder_spec, &params.encoder, &enc_in, n, Film::None)?)
    } else {
        None
    };
    let enc_out = match &enc_tape {
        Some(t) => t.output.clone(),
        None => forward_batch(&bundle.encoder_spec, &params.encoder, &enc_in, n, Film::None)?,
    };

    let fw = enc_dim + EMBED_DIM;
    let mut film_in = Vec::with_capacity(n * fw);
    for i in 0..n {
        if noise.keep[i] {
            film_in.extend_from_slice(&enc_out[i * enc_dim..(i + 1) * enc_dim]);
        } else {
            film_in.extend_from_slice(&params.null_token);
        }
        film_in.extend_from_slice(&noise_embedding(noise.s[i]));
    }
    let film_tape = if with_grad {
        Some(forward_tape(&bundle.film_spec, &params.film, &film_in, n, Film::None)?)
    } else {
        None
    };
    let mut films = match &film_tape {
        Some(t) => t.output.clone(),
        None => forward_batch(&bundle.film_spec, &params.film, &film_in, n, Film::None)?,
    };
    let widths = bundle.film_widths();
    let film_len = bundle.film_spec.output_width();
    for row in films.chunks_mut(film_len) {
        raw_to_film(row, &widths);
    }

    let dw = dx + EMBED_DIM;
    let mut d_in = Vec::with_capacity(n * dw);
    for (i, &r) in rows.iter().enumerate() {
        let (a, b) = schedule.alpha_beta(noise.s[i])?;
        for j in 0..dx {
            d_in.push(a * batch.den_x[r * dx + j] + b * noise.eps[i * dx + j]);
        }
        d_in.extend_from_slice(&noise_embedding(noise.s[i]));
    }
    let film = Film::PerSample(&films);
    let (out, d_tape) = if with_grad {
        let t = forward_tape(&bundle.denoiser_spec, &params.denoiser, &d_in, n, film)?;
        (t.output.clone(), Some(t))
    } else {
        (forward_batch(&bundle.denoiser_spec, &params.denoiser, &d_in, n, film)?, None)
    };

    let mut loss = 0.0;
    let mut d_out = vec![0.0; out.len()];
    for k in 0..out.len() {
        let e = out[k] - noise.eps[k];
        loss += e * e;
        d_out[k] = 2.0 * e / n as f64;
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(ModelError::Diverged {
            stage: "denoiser",
            step: 0,
            loss,
        });
    }
    let Some(d_tape) = d_tape else {
        return Ok((loss, None));
    };

    let gd = backward(&bundle.denoiser_spec, &params.denoiser, &d_tape, film, &d_out)?;
    let film_tape = film_tape.expect("taped");
    let gf = backward(&bundle.film_spec, &params.film, &film_tape, Film::None, &gd.film)?;
    let mut d_enc = vec![0.0; n * enc_dim];
    let mut null_grad = vec![0.0; enc_dim];
    for i in 0..n {
        let g = &gf.input[i * fw..i * fw + enc_dim];
        if noise.keep[i] {
            d_enc[i * enc_dim..(i + 1) * enc_dim].copy_from_slice(g);
        } else {
            for (a, b) in null_grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    let ge = backward(
        &bundle.encoder_spec,
        &params.encoder,
        enc_tape.as_ref().expect("taped"),
        Film::None,
        &d_enc,
    )?;
    Ok((
        loss,
        Some(DsmGrads {
            encoder: ge.params,
            film: gf.params,
            denoiser: gd.params,
            null_token: null_grad,
        }),
    ))
}

/// Monte-Carlo DSM loss over all denoiser rows with fresh noise.
pub fn dsm_loss<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    params: &BundleParams,
    schedule: &NoiseSchedule,
    batch: &TransitionBatch,
    p_drop: f64,
    rng: &mut R,
) -> Result<(f64, DsmGrads), ModelError> {
    let rows: Vec<usize> = (0..batch.n_den()).collect();
    let noise = DsmNoise::draw(batch, &rows, p_drop, rng);
    let (v, g) = dsm_loss_with_noise(bundle, params, schedule, batch, &rows, &noise, true)?;
    Ok((v, g.expect("gradients requested")))
}

/// Mean over rows of `−log N(x_t; μ_f, Σ_f)` and its gradient with respect
/// to the dynamics parameters. Clamped log-variances get zero gradient.
pub fn dynamics_nll_loss(
    bundle: &ModelBundle,
    params: &BundleParams,
    batch: &TransitionBatch,
    rows: &[usize],
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>), ModelError> {
    let n = rows.len();
    if n == 0 {
        return Err(ModelError::Invalid("empty batch".into()));
    }
    let (dx, du) = (batch.dx, batch.du);
    let mut input = Vec::with_capacity(n * (dx + du));
    for &r in rows {
        input.extend_from_slice(&batch.dyn_prev[r * dx..(r + 1) * dx]);
        input.extend_from_slice(&batch.dyn_u[r * du..(r + 1) * du]);
    }
    let tape = if with_grad {
        Some(forward_tape(&bundle.dynamics_spec, &params.dynamics, &input, n, Film::None)?)
    } else {
        None
    };
    let out = match &tape {
        Some(t) => t.output.clone(),
        None => forward_batch(&bundle.dynamics_spec, &params.dynamics, &input, n, Film::None)?,
    };
    let mut loss = 0.0;
    let mut d_out = vec![0.0; out.len()];
    for (i, &r) in rows.iter().enumerate() {
        let o = &out[i * 2 * dx..(i + 1) * 2 * dx];
        for j in 0..dx {
            let mu = batch.dyn_prev[r * dx + j] + o[j];
            let raw = o[dx + j];
            let lv = raw.clamp(LOGVAR_MIN, LOGVAR_MAX);
            let inv = (-lv).exp();
            let d = batch.dyn_next[r * dx + j] - mu;
            loss += 0.5 * (LN_2PI + lv + d * d * inv);
            d_out[i * 2 * dx + j] = -d * inv / n as f64;
            if (LOGVAR_MIN..=LOGVAR_MAX).contains(&raw) {
                d_out[i * 2 * dx + dx + j] = 0.5 * (1.0 - d * d * inv) / n as f64;
            }
        }
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(ModelError::Diverged {
            stage: "dynamics",
            step: 0,
            loss,
        });
    }
    let Some(tape) = tape else {
        return Ok((loss, None));
    };
    let g = backward(&bundle.dynamics_spec, &params.dynamics, &tape, Film::None, &d_out)?;
    Ok((loss, Some(g.params)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchConfig;
    use crate::nn::ParamSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            encoder_hidden: vec![6],
            encoder_dim: 3,
            film_hidden: vec![5],
            denoiser_hidden: vec![6, 6],
            dynamics_hidden: vec![6],
            ..Default::default()
        }
    }

    fn toy_batch(rng: &mut ChaCha8Rng) -> TransitionBatch {
        let mut b = TransitionBatch::new(2, 1, 1);
        for i in 0..7 {
            let x: [f64; 2] = [rng.random::<f64>() - 0.5, rng.random::<f64>() * 2.0 - 1.0];
            b.dyn_prev.extend_from_slice(&x);
            b.dyn_u.push(rng.random::<f64>());
            b.dyn_next.extend_from_slice(&[x[0] + 0.3, x[1] - 0.2]);
            b.den_x.extend_from_slice(&x);
            b.den_y.push(x[0] + x[1]);
            b.den_y_prev.push(x[0]);
            b.den_obs.push(i % 3 != 0);
        }
        b
    }

    #[test]
    fn residual_identity_nll() {
        let b = ModelBundle::new(small_arch(), NormStats::identity(1, 1, 1), 0).unwrap();
        let mut batch = TransitionBatch::new(1, 1, 1);
        batch.dyn_prev = vec![0.0];
        batch.dyn_u = vec![0.0];
        batch.dyn_next = vec![0.0];
        let (v, _) = dynamics_nll_loss(&b, &b.params, &batch, &[0], false).unwrap();
        assert!((v - 0.5 * LN_2PI).abs() < 1e-12);
        batch.dyn_next = vec![1.0];
        let (v, _) = dynamics_nll_loss(&b, &b.params, &batch, &[0], false).unwrap();
        assert!((v - 1.4189385332046727).abs() < 1e-12);
    }

    #[test]
    fn zero_denoiser_loss_is_chi_square_mean() {
        let b = ModelBundle::new(small_arch(), NormStats::identity(2, 1, 1), 0).unwrap();
        let sch = NoiseSchedule::new(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut batch = TransitionBatch::new(2, 1, 1);
        for _ in 0..20_000 {
            batch.den_x.extend_from_slice(&[rng.random::<f64>(), -1.0]);
            batch.den_y.push(0.0);
            batch.den_y_prev.push(0.0);
            batch.den_obs.push(true);
        }
        let rows: Vec<usize> = (0..batch.n_den()).collect();
        let noise = DsmNoise::draw(&batch, &rows, 0.1, &mut rng);
        let (v, _) = dsm_loss_with_noise(&b, &b.params, &sch, &batch, &rows, &noise, false).unwrap();
        // E‖ε‖² = 2, standard error √(2·2/20000) ≈ 0.014
        assert!((v - 2.0).abs() < 0.05, "{v}");
    }

    fn perturbed(p: &BundleParams, which: usize, k: usize, h: f64) -> BundleParams {
        let mut q = p.clone();
        let v = match which {
            0 => &mut q.encoder.values[k],
            1 => &mut q.film.values[k],
            2 => &mut q.denoiser.values[k],
            3 => &mut q.null_token[k],
            _ => &mut q.dynamics.values[k],
        };
        *v += h;
        q
    }

    fn randomize(p: &mut ParamSet, rng: &mut ChaCha8Rng) {
        for v in p.values.iter_mut() {
            *v += 0.3 * (rng.random::<f64>() - 0.5);
        }
    }

    #[test]
    fn dsm_gradient_matches_finite_differences() {
        let mut b = ModelBundle::new(small_arch(), NormStats::identity(2, 1, 1), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        randomize(&mut b.params.film, &mut rng);
        randomize(&mut b.params.denoiser, &mut rng);
        b.params.null_token = vec![0.2, -0.4, 0.1];
        let sch = NoiseSchedule::new(50).unwrap();
        let batch = toy_batch(&mut rng);
        let rows: Vec<usize> = (0..batch.n_den()).collect();
        let noise = DsmNoise::draw(&batch, &rows, 0.3, &mut rng);
        assert!(noise.keep.iter().any(|k| *k) && noise.keep.iter().any(|k| !*k));
        let (_, g) = dsm_loss_with_noise(&b, &b.params, &sch, &batch, &rows, &noise, true).unwrap();
        let g = g.unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (which, grad) in [(0, &g.encoder), (1, &g.film), (2, &g.denoiser), (3, &g.null_token)] {
            for k in (0..grad.len()).step_by(grad.len().div_ceil(25).max(1)) {
                let f = |d: f64| {
                    let q = perturbed(&b.params, which, k, d);
                    dsm_loss_with_noise(&b, &q, &sch, &batch, &rows, &noise, false).unwrap().0
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                let rel = (fd - grad[k]).abs() / (fd.abs() + grad[k].abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut b = ModelBundle::new(small_arch(), NormStats::identity(2, 1, 1), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        randomize(&mut b.params.dynamics, &mut rng);
        let batch = toy_batch(&mut rng);
        let rows: Vec<usize> = (0..batch.n_dyn()).collect();
        let (_, g) = dynamics_nll_loss(&b, &b.params, &batch, &rows, true).unwrap();
        let g = g.unwrap();
        let h = 1e-5;
        for k in 0..g.len() {
            let f = |d: f64| {
                let q = perturbed(&b.params, 4, k, d);
                dynamics_nll_loss(&b, &q, &batch, &rows, false).unwrap().0
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            let rel = (fd - g[k]).abs() / (fd.abs() + g[k].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {k}: fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn full_dropout_matches_unconditional_loss() {
        let mut b = ModelBundle::new(small_arch(), NormStats::identity(2, 1, 1), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        randomize(&mut b.params.film, &mut rng);
        randomize(&mut b.params.denoiser, &mut rng);
        let sch = NoiseSchedule::new(50).unwrap();
        let batch = toy_batch(&mut rng);
        let rows: Vec<usize> = (0..batch.n_den()).collect();
        let dropped = DsmNoise::draw(&batch, &rows, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let mut masked = batch.clone();
        masked.den_obs = vec![false; masked.n_den()];
        let unobserved = DsmNoise::draw(&masked, &rows, 0.0, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(dropped, unobserved);
        let a = dsm_loss_with_noise(&b, &b.params, &sch, &batch, &rows, &dropped, false).unwrap().0;
        let c = dsm_loss_with_noise(&b, &b.params, &sch, &masked, &rows, &unobserved, false).unwrap().0;
        assert_eq!(a, c);
    }
}
