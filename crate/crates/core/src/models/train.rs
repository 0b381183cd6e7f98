use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{dsm_loss_with_noise, dynamics_nll_loss, DsmNoise, TransitionBatch};
use super::{BundleParams, ModelBundle, ModelError};
use crate::diffusion::NoiseSchedule;
use crate::nn::{clip_global_norm, ema_update, Adam, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    /// Cosine decay from `lr` to `lr · lr_final_fraction`.
    pub lr_final_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps per stage.
    pub max_steps: Option<usize>,
    pub p_drop: f64,
    pub ema_decay: f64,
    pub clip_norm: f64,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// At most this many validation rows are used.
    pub max_val_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lr: 1e-3,
            lr_final_fraction: 0.1,
            batch_size: 256,
            epochs: 100,
            max_steps: None,
            p_drop: 0.1,
            ema_decay: 0.999,
            clip_norm: 10.0,
            eval_every: 200,
            patience: 10,
            max_val_rows: 4096,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Invalid(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return bad("lr_final_fraction must be in [0, 1]");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return bad("batch_size, epochs and eval_every must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return bad("p_drop must be a probability");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must be in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        let p = step as f64 / total.max(1) as f64;
        let f = self.lr_final_fraction + (1.0 - self.lr_final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        self.lr * f
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub steps: usize,
    pub best_step: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    /// `(step, validation loss of the EMA parameters)`
    pub val_curve: Vec<(usize, f64)>,
    /// `(step, mean training loss since the previous evaluation)`
    pub train_curve: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub denoiser: Option<StageReport>,
    pub dynamics: Option<StageReport>,
}

fn ema_decay_at(decay: f64, step: usize) -> f64 {
    decay.min((1.0 + step as f64) / (10.0 + step as f64))
}

fn val_rows(n: usize, cap: usize) -> Vec<usize> {
    (0..n.min(cap)).collect()
}

struct Stopper {
    report: StageReport,
    since_best: usize,
    patience: usize,
}

impl Stopper {
    fn new(patience: usize) -> Self {
        Stopper {
            report: StageReport {
                best_val: f64::INFINITY,
                ..Default::default()
            },
            since_best: 0,
            patience,
        }
    }

    /// Records an evaluation; returns `(improved, stop)`.
    fn record(&mut self, step: usize, val: f64, train_mean: f64) -> (bool, bool) {
        self.report.val_curve.push((step, val));
        self.report.train_curve.push((step, train_mean));
        if val < self.report.best_val {
            self.report.best_val = val;
            self.report.best_step = step;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }
}

fn stage_steps(cfg: &TrainConfig, rows: usize) -> usize {
    let per_epoch = rows.div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    cfg.max_steps.map_or(total, |m| total.min(m))
}

fn train_denoiser(
    bundle: &mut ModelBundle,
    train: &TransitionBatch,
    val: &TransitionBatch,
    cfg: &TrainConfig,
) -> Result<StageReport, ModelError> {
    let schedule = NoiseSchedule::new(50)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(10);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    val_rng.set_stream(11);
    let vrows = val_rows(val.n_den(), cfg.max_val_rows);
    let val_noise = DsmNoise::draw(val, &vrows, cfg.p_drop, &mut val_rng);

    let p = &bundle.params;
    let mut opt = [
        Adam::new(p.encoder.len(), cfg.lr),
        Adam::new(p.film.len(), cfg.lr),
        Adam::new(p.denoiser.len(), cfg.lr),
        Adam::new(p.null_token.len(), cfg.lr),
    ];
    let total = stage_steps(cfg, train.n_den());
    let mut order: Vec<usize> = (0..train.n_den()).collect();
    let mut cursor = order.len();
    let mut stop = Stopper::new(cfg.patience);
    let mut best: BundleParams = bundle.ema.clone();
    let mut acc = (0.0, 0usize);
    let mut step = 0;
    while step < total {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let rows = &order[cursor..end];
        cursor = end;
        let noise = DsmNoise::draw(train, rows, cfg.p_drop, &mut rng);
        let (loss, grads) = dsm_loss_with_noise(bundle, &bundle.params, &schedule, train, rows, &noise, true)
            .map_err(|e| relabel(e, "denoiser", step))?;
        let mut g = grads.expect("gradients requested");
        clip_global_norm(
            &mut [&mut g.encoder, &mut g.film, &mut g.denoiser, &mut g.null_token],
            cfg.clip_norm,
        );
        let lr = cfg.lr_at(step, total);
        for o in opt.iter_mut() {
            o.lr = lr;
        }
        let p = &mut bundle.params;
        opt[0].update(&mut p.encoder.values, &g.encoder)?;
        opt[1].update(&mut p.film.values, &g.film)?;
        opt[2].update(&mut p.denoiser.values, &g.denoiser)?;
        opt[3].update(&mut p.null_token, &g.null_token)?;
        let d = ema_decay_at(cfg.ema_decay, step);
        ema_update(&mut bundle.ema.encoder, &bundle.params.encoder, d)?;
        ema_update(&mut bundle.ema.film, &bundle.params.film, d)?;
        ema_update(&mut bundle.ema.denoiser, &bundle.params.denoiser, d)?;
        let mut null = ParamSet::free(bundle.ema.null_token.clone());
        ema_update(&mut null, &ParamSet::free(bundle.params.null_token.clone()), d)?;
        bundle.ema.null_token = null.values;
        acc.0 += loss;
        acc.1 += 1;
        step += 1;

        if step % cfg.eval_every == 0 || step == total {
            let (v, _) = dsm_loss_with_noise(bundle, &bundle.ema, &schedule, val, &vrows, &val_noise, false)
                .map_err(|e| relabel(e, "denoiser", step))?;
            let (improved, halt) = stop.record(step, v, acc.0 / acc.1 as f64);
            acc = (0.0, 0);
            if improved {
                best = bundle.ema.clone();
            }
            if halt {
                stop.report.stopped_early = true;
                break;
            }
        }
    }
    stop.report.steps = step;
    bundle.ema.encoder = best.encoder;
    bundle.ema.film = best.film;
    bundle.ema.denoiser = best.denoiser;
    bundle.ema.null_token = best.null_token;
    Ok(stop.report)
}

fn train_dynamics(
    bundle: &mut ModelBundle,
    train: &TransitionBatch,
    val: &TransitionBatch,
    cfg: &TrainConfig,
) -> Result<StageReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(20);
    let vrows = val_rows(val.n_dyn(), cfg.max_val_rows);
    let mut opt = Adam::new(bundle.params.dynamics.len(), cfg.lr);
    let total = stage_steps(cfg, train.n_dyn());
    let mut order: Vec<usize> = (0..train.n_dyn()).collect();
    let mut cursor = order.len();
    let mut stop = Stopper::new(cfg.patience);
    let mut best = bundle.ema.dynamics.clone();
    let mut acc = (0.0, 0usize);
    let mut step = 0;
    while step < total {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let rows = &order[cursor..end];
        cursor = end;
        let (loss, grads) =
            dynamics_nll_loss(bundle, &bundle.params, train, rows, true).map_err(|e| relabel(e, "dynamics", step))?;
        let mut g = grads.expect("gradients requested");
        clip_global_norm(&mut [&mut g], cfg.clip_norm);
        opt.lr = cfg.lr_at(step, total);
        opt.update(&mut bundle.params.dynamics.values, &g)?;
        ema_update(
            &mut bundle.ema.dynamics,
            &bundle.params.dynamics,
            ema_decay_at(cfg.ema_decay, step),
        )?;
        acc.0 += loss;
        acc.1 += 1;
        step += 1;

        if step % cfg.eval_every == 0 || step == total {
            let (v, _) =
                dynamics_nll_loss(bundle, &bundle.ema, val, &vrows, false).map_err(|e| relabel(e, "dynamics", step))?;
            let (improved, halt) = stop.record(step, v, acc.0 / acc.1 as f64);
            acc = (0.0, 0);
            if improved {
                best = bundle.ema.dynamics.clone();
            }
            if halt {
                stop.report.stopped_early = true;
                break;
            }
        }
    }
    stop.report.steps = step;
    bundle.ema.dynamics = best;
    Ok(stop.report)
}

fn relabel(e: ModelError, stage: &'static str, step: usize) -> ModelError {
    match e {
        ModelError::Diverged { loss, .. } => ModelError::Diverged { stage, step, loss },
        other => other,
    }
}

/// Minibatch Adam training of `(E, F, D)` on the DSM loss and of `f` on the
/// Gaussian NLL, with EMA shadows and early stopping on the validation loss
/// of the shadows. The best shadow is kept. Deterministic given `cfg.seed`.
pub fn train(
    bundle: &mut ModelBundle,
    train: &TransitionBatch,
    val: &TransitionBatch,
    cfg: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    cfg.validate()?;
    if train.dx != bundle.dx || train.dy != bundle.dy || (train.n_dyn() > 0 && train.du != bundle.du) {
        return Err(ModelError::Dimension("training data does not match the bundle".into()));
    }
    if train.n_den() == 0 {
        return Err(ModelError::Invalid("no training rows".into()));
    }
    let mut report = TrainReport::default();
    if val.n_den() == 0 {
        return Err(ModelError::Invalid("no validation rows".into()));
    }
    report.denoiser = Some(train_denoiser(bundle, train, val, cfg)?);
    if train.n_dyn() > 0 {
        if val.n_dyn() == 0 {
            return Err(ModelError::Invalid("no validation transitions".into()));
        }
        report.dynamics = Some(train_dynamics(bundle, train, val, cfg)?);
    }
    bundle.provenance = serde_json::json!({
        "train_config": cfg,
        "train_rows": train.n_den(),
        "train_transitions": train.n_dyn(),
        "denoiser_best_val": report.denoiser.as_ref().map(|r| r.best_val),
        "dynamics_best_val": report.dynamics.as_ref().map(|r| r.best_val),
    });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let c = TrainConfig::default();
        assert!((c.lr_at(0, 100) - c.lr).abs() < 1e-15);
        assert!((c.lr_at(100, 100) - c.lr * c.lr_final_fraction).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_config() {
        let c = TrainConfig {
            ema_decay: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
