use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{log_sum_exp, EvalError};
use crate::filter::ParticleSet;
use crate::tasks::{RolloutRecord, Task};

/// Effective sample size below which the weights count as collapsed.
const ESS_COLLAPSE: f64 = 1.0 + 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    /// Weighted particle sets before resampling, `t = 0..=T`.
    pub steps: Vec<ParticleSet>,
    pub ess: Vec<f64>,
    /// Timesteps at which the weights collapsed and the set was re-drawn from the prior.
    pub reinit_events: Vec<usize>,
}

impl BootstrapResult {
    pub fn means(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|p| p.mean()).collect()
    }
}

/// Systematic resampling: one uniform offset, `n` evenly spaced pointers.
pub fn systematic_resample(weights: &[f64], u0: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for k in 0..n {
        let p = (u0 + k as f64) / n as f64;
        while p > cum && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

fn weigh(task: &dyn Task, rec: &RolloutRecord, t: usize, states: &[f64], n: usize) -> Result<Option<Vec<f64>>, EvalError> {
    if !rec.obs[t] {
        return Ok(None);
    }
    let d = task.state_dim();
    let mut logw = Vec::with_capacity(n);
    for i in 0..n {
        let l = task
            .measurement_log_density(&rec.y[t], &states[i * d..(i + 1) * d], &rec.u[t])
            .ok_or_else(|| EvalError::Invalid(format!("{} has no measurement density", task.name())))?;
        logw.push(l);
    }
    let z = log_sum_exp(&logw);
    Ok(Some(if z.is_finite() {
        logw.iter().map(|l| (l - z).exp()).collect()
    } else {
        vec![0.0; n]
    }))
}

/// Propagate, weigh and resample with the task's true models.
pub fn bootstrap_pf(task: &dyn Task, rec: &RolloutRecord, n: usize, seed: u64) -> Result<BootstrapResult, EvalError> {
    if n == 0 {
        return Err(EvalError::Invalid("bootstrap filter needs at least one particle".into()));
    }
    let d = task.state_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states: Vec<f64> = (0..n).flat_map(|_| task.sample_prior(&mut rng)).collect();
    let mut out = BootstrapResult {
        steps: Vec::with_capacity(rec.x.len()),
        ess: Vec::with_capacity(rec.x.len()),
        reinit_events: Vec::new(),
    };
    for t in 0..rec.x.len() {
        if t > 0 {
            let mut next = Vec::with_capacity(n * d);
            for i in 0..n {
                next.extend(task.step(&states[i * d..(i + 1) * d], &rec.u[t], &mut rng));
            }
            states = next;
        }
        let mut weights = weigh(task, rec, t, &states, n)?.unwrap_or_else(|| vec![1.0 / n as f64; n]);
        let mut ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        if !ess.is_finite() || (ess < ESS_COLLAPSE && n > 1) {
            out.reinit_events.push(t);
            states = (0..n).flat_map(|_| task.sample_prior(&mut rng)).collect();
            weights = weigh(task, rec, t, &states, n)?.unwrap_or_else(|| vec![1.0 / n as f64; n]);
            if weights.iter().all(|w| *w == 0.0) {
                weights = vec![1.0 / n as f64; n];
            }
            ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        }
        let mut set = ParticleSet::from_states(d, states.clone(), t);
        set.weights = weights.clone();
        out.steps.push(set);
        out.ess.push(ess);
        let idx = systematic_resample(&weights, rng.random::<f64>());
        states = idx.iter().flat_map(|&i| states[i * d..(i + 1) * d].to_vec()).collect();
    }
    Ok(out)
}
