use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::sensor::{external_sensor_noise_into, GaussianSensorModel, SensorLevels};
use super::{constrained_combine, guided_noise, FilterError, InferenceConfig, InferenceMode, ParticleSet};
use crate::diffusion::{denoise_step_in_place, gaussian_perturbed_noise_into, GaussianDynOut, NoiseSchedule};
use crate::models::{NoiseMode, ScoreModel};
use crate::tasks::{NormStats, RolloutRecord};

/// Attempts per particle before falling back to the dynamics mean.
const MAX_ATTEMPTS: u64 = 4;

/// Draws one initial state (normalized units).
pub type PriorSampler<'a> = &'a (dyn Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync);

/// Normalized inputs for one filtering run. Index 0 holds `y_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterInput {
    pub y: Vec<Option<Vec<f64>>>,
    pub u: Vec<Vec<f64>>,
    /// External sensor readings `ŷ_t`, if a sensor is fused.
    pub sensor: Option<Vec<Option<Vec<f64>>>>,
}

impl FilterInput {
    pub fn from_rollout(rec: &RolloutRecord, stats: &NormStats) -> Self {
        FilterInput {
            y: rec
                .y
                .iter()
                .zip(&rec.obs)
                .map(|(y, o)| o.then(|| stats.y.normalize(y)))
                .collect(),
            u: rec.u.iter().map(|u| stats.u.normalize(u)).collect(),
            sensor: None,
        }
    }

    pub fn horizon(&self) -> usize {
        self.y.len().saturating_sub(1)
    }

    /// `(y_t, y_prev)` with `y_prev` the latest available observation before
    /// `t` (or `y_t` itself when there is none).
    pub fn obs_pair(&self, t: usize) -> Option<(&[f64], &[f64])> {
        let y = self.y[t].as_deref()?;
        let prev = (0..t).rev().find_map(|k| self.y[k].as_deref()).unwrap_or(y);
        Some((y, prev))
    }

    fn sensor_at(&self, t: usize) -> Option<&[f64]> {
        self.sensor.as_ref()?.get(t)?.as_deref()
    }
}

/// Per-timestep summary of the denoising runs.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepDiagnostics {
    pub t: usize,
    pub observed: bool,
    pub sensor_used: bool,
    /// Mean of `|ε_lh|` over particles, dimensions and levels.
    pub mean_abs_eps_lh: f64,
    pub max_abs_eps_lh: f64,
    /// Final multipliers, averaged and maximized over particles and dimensions.
    pub mean_lambda: f64,
    pub max_lambda: f64,
    /// Fraction of (particle, dimension, level) entries with `|ε_lh| > θ`.
    pub active_fraction: f64,
    /// Particles re-drawn after a non-finite result.
    pub redraws: usize,
    /// Particles that failed every re-draw and fell back to the dynamics mean.
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub particles: ParticleSet,
    pub diag: StepDiagnostics,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.steps.first().map_or(0, |s| s.particles.dim)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Lh {
    Cond,
    Uncond,
}

struct Plan<'a, M: ScoreModel> {
    model: &'a M,
    ctx: Option<M::Context>,
    schedule: NoiseSchedule,
    levels: Vec<f64>,
    lh: Lh,
    guidance: f64,
    constraint: Option<(f64, f64)>,
    use_dyn: bool,
    sensor: Option<(&'a GaussianSensorModel, SensorLevels, &'a [f64])>,
    /// Start from `α_{s_0} μ_f + β_{s_0} ε` (else pure noise).
    warm: bool,
}

#[derive(Default, Clone)]
struct Acc {
    abs_sum: f64,
    abs_n: usize,
    abs_max: f64,
    active: usize,
    lambda_sum: f64,
    lambda_max: f64,
    lambda_n: usize,
    redraws: usize,
    fallbacks: usize,
}

impl Acc {
    fn merge(&mut self, o: &Acc) {
        self.abs_sum += o.abs_sum;
        self.abs_n += o.abs_n;
        self.abs_max = self.abs_max.max(o.abs_max);
        self.active += o.active;
        self.lambda_sum += o.lambda_sum;
        self.lambda_max = self.lambda_max.max(o.lambda_max);
        self.lambda_n += o.lambda_n;
        self.redraws += o.redraws;
        self.fallbacks += o.fallbacks;
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream per `(seed, t, particle, attempt)`.
fn particle_rng(seed: u64, t: usize, i: usize, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed) ^ t as u64) ^ mix(i as u64));
    rng.set_stream(attempt);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl<M: ScoreModel> Plan<'_, M> {
    /// Integrates `n` rows from `levels[0]` to 1 in place. Rows that turn
    /// non-finite are zeroed and flagged in `bad`.
    fn integrate(
        &self,
        dyns: &[GaussianDynOut],
        x: &mut [f64],
        lambda: &mut [f64],
        bad: &mut [bool],
        acc: &mut Acc,
    ) -> Result<(), FilterError> {
        let d = self.model.state_dim();
        let n = bad.len();
        let mut e_c = vec![0.0; n * d];
        let mut e_u = vec![0.0; n * d];
        let mut e_lh = vec![0.0; n * d];
        let mut e_dy = vec![0.0; n * d];
        let mut e = vec![0.0; n * d];
        for k in 0..self.levels.len() - 1 {
            let (s, s_next) = (self.levels[k], self.levels[k + 1]);
            match self.lh {
                Lh::Cond => {
                    let ctx = self.ctx.as_ref().expect("context prepared");
                    self.model.predict_noise(ctx, k, NoiseMode::Conditional, x, n, &mut e_c)?;
                    if self.guidance > 0.0 {
                        self.model.predict_noise(ctx, k, NoiseMode::Unconditional, x, n, &mut e_u)?;
                        guided_noise(&e_c, &e_u, self.guidance, &mut e_lh);
                    } else {
                        e_lh.copy_from_slice(&e_c);
                    }
                }
                Lh::Uncond => {
                    let ctx = self.ctx.as_ref().expect("context prepared");
                    self.model.predict_noise(ctx, k, NoiseMode::Unconditional, x, n, &mut e_lh)?;
                }
            }
            if let Some((sensor, pre, y_hat)) = &self.sensor {
                if pre.active(k) {
                    for i in 0..n {
                        let r = i * d..(i + 1) * d;
                        external_sensor_noise_into(sensor, pre, y_hat, &x[r.clone()], k, &mut e_lh[r]);
                    }
                }
            }
            if self.use_dyn {
                for i in 0..n {
                    let r = i * d..(i + 1) * d;
                    gaussian_perturbed_noise_into(&self.schedule, &dyns[i], &x[r.clone()], s, &mut e_dy[r])?;
                }
            }
            for i in 0..n {
                if bad[i] {
                    continue;
                }
                let r = i * d..(i + 1) * d;
                for &v in &e_lh[r.clone()] {
                    acc.abs_sum += v.abs();
                    acc.abs_max = acc.abs_max.max(v.abs());
                }
                acc.abs_n += d;
                match (self.constraint, self.use_dyn) {
                    (Some((theta, rho)), true) => {
                        acc.active += e_lh[r.clone()].iter().filter(|v| v.abs() > theta).count();
                        constrained_combine(
                            &e_lh[r.clone()],
                            &e_dy[r.clone()],
                            &mut lambda[r.clone()],
                            theta,
                            rho,
                            &mut e[r.clone()],
                        );
                    }
                    (_, true) => {
                        for j in r.clone() {
                            e[j] = e_lh[j] + e_dy[j];
                        }
                    }
                    (_, false) => e[r.clone()].copy_from_slice(&e_lh[r.clone()]),
                }
                let ok = e[r.clone()].iter().all(|v| v.is_finite())
                    && denoise_step_in_place(&self.schedule, &mut x[r.clone()], &e[r.clone()], s, s_next).is_ok();
                if !ok {
                    bad[i] = true;
                    x[r].fill(0.0);
                }
            }
        }
        Ok(())
    }

    /// Starting point of one particle's run.
    fn start(&self, dyn_out: Option<&GaussianDynOut>, rng: &mut ChaCha8Rng, out: &mut [f64]) -> Result<(), FilterError> {
        let (a, b) = self.schedule.alpha_beta(self.levels[0])?;
        for (j, o) in out.iter_mut().enumerate() {
            let eps = normal(rng);
            *o = match (self.warm, dyn_out) {
                (true, Some(dy)) => a * dy.mean[j] + b * eps,
                _ => eps,
            };
        }
        Ok(())
    }

    /// Runs particles `range` given their ancestors' dynamics predictions.
    fn run_chunk(
        &self,
        seed: u64,
        t: usize,
        first: usize,
        dyns: &[GaussianDynOut],
        n: usize,
    ) -> Result<(Vec<f64>, Acc), FilterError> {
        let d = self.model.state_dim();
        let mut acc = Acc::default();
        let mut x = vec![0.0; n * d];
        for i in 0..n {
            let mut rng = particle_rng(seed, t, first + i, 0);
            self.start(dyns.get(i), &mut rng, &mut x[i * d..(i + 1) * d])?;
        }
        let mut lambda = vec![0.0; n * d];
        let mut bad = vec![false; n];
        self.integrate(dyns, &mut x, &mut lambda, &mut bad, &mut acc)?;
        for i in 0..n {
            if !bad[i] {
                continue;
            }
            acc.redraws += 1;
            let one = dyns.get(i).map(std::slice::from_ref).unwrap_or(&[]);
            let mut done = false;
            for attempt in 1..MAX_ATTEMPTS {
                let mut rng = particle_rng(seed, t, first + i, attempt);
                let mut xi = vec![0.0; d];
                self.start(dyns.get(i), &mut rng, &mut xi)?;
                let mut li = vec![0.0; d];
                let mut bi = [false];
                self.integrate(one, &mut xi, &mut li, &mut bi, &mut acc)?;
                if !bi[0] {
                    x[i * d..(i + 1) * d].copy_from_slice(&xi);
                    lambda[i * d..(i + 1) * d].copy_from_slice(&li);
                    done = true;
                    break;
                }
            }
            if !done {
                acc.fallbacks += 1;
                let r = i * d..(i + 1) * d;
                match dyns.get(i) {
                    Some(dy) => x[r.clone()].copy_from_slice(&dy.mean),
                    None => x[r.clone()].fill(0.0),
                }
                lambda[r].fill(0.0);
            }
        }
        for &l in &lambda {
            acc.lambda_sum += l;
            acc.lambda_max = acc.lambda_max.max(l);
        }
        acc.lambda_n += lambda.len();
        Ok((x, acc))
    }
}

fn finish(t: usize, observed: bool, sensor_used: bool, acc: &Acc) -> StepDiagnostics {
    StepDiagnostics {
        t,
        observed,
        sensor_used,
        mean_abs_eps_lh: if acc.abs_n > 0 { acc.abs_sum / acc.abs_n as f64 } else { 0.0 },
        max_abs_eps_lh: acc.abs_max,
        mean_lambda: if acc.lambda_n > 0 { acc.lambda_sum / acc.lambda_n as f64 } else { 0.0 },
        max_lambda: acc.lambda_max,
        active_fraction: if acc.abs_n > 0 { acc.active as f64 / acc.abs_n as f64 } else { 0.0 },
        redraws: acc.redraws,
        fallbacks: acc.fallbacks,
    }
}

fn chunks(n: usize, size: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(size)).map(|c| (c * size, size.min(n - c * size))).collect()
}

fn run_plan<M: ScoreModel>(
    plan: &Plan<'_, M>,
    cfg: &InferenceConfig,
    t: usize,
    dyns: Option<&[GaussianDynOut]>,
) -> Result<(Vec<f64>, Acc), FilterError> {
    let parts = chunks(cfg.particles, cfg.chunk)
        .into_par_iter()
        .map(|(first, n)| {
            let ds = dyns.map_or(&[][..], |d| &d[first..first + n]);
            plan.run_chunk(cfg.seed, t, first, ds, n)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut states = Vec::with_capacity(cfg.particles * plan.model.state_dim());
    let mut acc = Acc::default();
    for (x, a) in parts {
        states.extend(x);
        acc.merge(&a);
    }
    Ok((states, acc))
}

fn sensor_levels<'a>(
    sensor: Option<(&'a GaussianSensorModel, &'a [f64])>,
    schedule: &NoiseSchedule,
    levels: &[f64],
    dim: usize,
) -> Result<Option<(&'a GaussianSensorModel, SensorLevels, &'a [f64])>, FilterError> {
    match sensor {
        Some((s, y)) => {
            s.validate(dim)?;
            if y.len() != s.r.len() {
                return Err(FilterError::Dimension("sensor reading length".into()));
            }
            Ok(Some((s, s.levels(schedule, levels)?, y)))
        }
        None => Ok(None),
    }
}

/// Initial particle set: `N` prior draws, or a full conditional denoising run
/// from pure noise given `y_0`.
pub fn init_particles<M: ScoreModel>(
    model: &M,
    cfg: &InferenceConfig,
    prior: Option<PriorSampler<'_>>,
    y0: Option<(&[f64], &[f64])>,
    sensor: Option<(&GaussianSensorModel, &[f64])>,
) -> Result<(ParticleSet, StepDiagnostics), FilterError> {
    cfg.validate()?;
    let d = model.state_dim();
    if let Some(sample) = prior {
        let mut states = Vec::with_capacity(cfg.particles * d);
        for i in 0..cfg.particles {
            let x = sample(&mut particle_rng(cfg.seed, 0, i, 0));
            if x.len() != d {
                return Err(FilterError::Dimension("prior sample length".into()));
            }
            states.extend(x);
        }
        return Ok((ParticleSet::from_states(d, states, 0), finish(0, y0.is_some(), false, &Acc::default())));
    }
    let Some(obs) = y0 else {
        return Err(FilterError::Config("initialization needs a prior or an initial observation".into()));
    };
    let schedule = NoiseSchedule::new(cfg.steps)?;
    let levels = schedule.warm_start_levels(0.0)?;
    let eval = &levels[..levels.len() - 1];
    let plan = Plan {
        model,
        ctx: Some(model.prepare(Some(obs), eval)?),
        sensor: sensor_levels(sensor, &schedule, eval, d)?,
        schedule,
        levels,
        lh: Lh::Cond,
        guidance: cfg.guidance,
        constraint: None,
        use_dyn: false,
        warm: false,
    };
    let (states, acc) = run_plan(&plan, cfg, 0, None)?;
    let used = plan.sensor.is_some();
    Ok((ParticleSet::from_states(d, states, 0), finish(0, true, used, &acc)))
}

/// One filtering step from `prev` (time `t − 1`) to time `t`.
pub fn dnpf_step<M: ScoreModel>(
    model: &M,
    prev: &ParticleSet,
    obs: Option<(&[f64], &[f64])>,
    u: &[f64],
    sensor: Option<(&GaussianSensorModel, &[f64])>,
    cfg: &InferenceConfig,
    t: usize,
) -> Result<(ParticleSet, StepDiagnostics), FilterError> {
    cfg.validate()?;
    let d = model.state_dim();
    if prev.dim != d || prev.len() != cfg.particles {
        return Err(FilterError::Dimension("particle set does not match model and config".into()));
    }

    let dyns: Vec<GaussianDynOut> = if cfg.mode == InferenceMode::LikelihoodOnly {
        Vec::new()
    } else {
        (0..prev.len())
            .into_par_iter()
            .map(|i| model.predict_dynamics(prev.particle(i), u))
            .collect::<Result<_, _>>()?
    };

    if cfg.mode == InferenceMode::DynamicsOnly {
        let mut states = vec![0.0; cfg.particles * d];
        for (i, dy) in dyns.iter().enumerate() {
            let mut rng = particle_rng(cfg.seed, t, i, 0);
            for j in 0..d {
                states[i * d + j] = dy.mean[j] + dy.var[j].sqrt() * normal(&mut rng);
            }
        }
        return Ok((ParticleSet::from_states(d, states, t), finish(t, obs.is_some(), false, &Acc::default())));
    }

    let schedule = NoiseSchedule::new(cfg.steps)?;
    let (levels, lh, use_dyn, warm) = match cfg.mode {
        InferenceMode::LikelihoodOnly => (
            schedule.warm_start_levels(0.0)?,
            if obs.is_some() { Lh::Cond } else { Lh::Uncond },
            false,
            false,
        ),
        InferenceMode::DynamicsPrior => (schedule.warm_start_levels(cfg.warm_start)?, Lh::Uncond, true, true),
        _ => (
            schedule.warm_start_levels(cfg.warm_start)?,
            if obs.is_some() { Lh::Cond } else { Lh::Uncond },
            true,
            true,
        ),
    };
    let eval = &levels[..levels.len() - 1];
    let obs_used = if lh == Lh::Cond { obs } else { None };
    let sensor = if cfg.mode == InferenceMode::DynamicsPrior { None } else { sensor };
    let constraint = (cfg.constraint.enabled && lh == Lh::Cond && cfg.mode == InferenceMode::Full)
        .then_some((cfg.constraint.theta, cfg.constraint.rho));
    let plan = Plan {
        model,
        ctx: Some(model.prepare(obs_used, eval)?),
        sensor: sensor_levels(sensor, &schedule, eval, d)?,
        schedule,
        levels,
        lh,
        guidance: cfg.guidance,
        constraint,
        use_dyn,
        warm,
    };
    let (states, acc) = run_plan(&plan, cfg, t, if use_dyn { Some(&dyns) } else { None })?;
    let used = plan.sensor.is_some();
    let mut set = ParticleSet::from_states(d, states, t);
    set.lambda.fill(0.0);
    Ok((set, finish(t, obs_used.is_some(), used, &acc)))
}

/// Initialization followed by one [`dnpf_step`] per timestep.
pub fn filter_rollout<M: ScoreModel>(
    model: &M,
    input: &FilterInput,
    cfg: &InferenceConfig,
    prior: Option<PriorSampler<'_>>,
    sensor: Option<&GaussianSensorModel>,
) -> Result<Trajectory, FilterError> {
    if input.y.is_empty() || input.u.len() != input.y.len() {
        return Err(FilterError::Dimension("observation and control sequences must be nonempty and aligned".into()));
    }
    let reading = |t: usize| sensor.zip(input.sensor_at(t));
    let mut steps = Vec::with_capacity(input.y.len());
    let clock = Instant::now();
    let (mut particles, diag) = init_particles(model, cfg, prior, input.obs_pair(0), reading(0))?;
    steps.push(StepRecord {
        particles: particles.clone(),
        diag,
        wall_seconds: clock.elapsed().as_secs_f64(),
    });
    for t in 1..input.y.len() {
        let clock = Instant::now();
        let (next, diag) = dnpf_step(model, &particles, input.obs_pair(t), &input.u[t], reading(t), cfg, t)?;
        particles = next;
        steps.push(StepRecord {
            particles: particles.clone(),
            diag,
            wall_seconds: clock.elapsed().as_secs_f64(),
        });
    }
    Ok(Trajectory { steps })
}
