use serde::{Deserialize, Serialize};

use super::{NnError, ParamSet};

/// Adam optimizer state aligned with one [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update. On error the parameters are left untouched.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::Dimension(format!(
                "optimizer state has {} entries, params {}, grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient { index: i });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// `shadow ← decay·shadow + (1 − decay)·params`
pub fn ema_update(shadow: &mut ParamSet, params: &ParamSet, decay: f64) -> Result<(), NnError> {
    if shadow.len() != params.len() {
        return Err(NnError::Dimension("EMA shadow and params differ in length".into()));
    }
    if !(0.0..1.0).contains(&decay) {
        return Err(NnError::Dimension(format!("EMA decay {decay} outside [0, 1)")));
    }
    for (s, p) in shadow.values.iter_mut().zip(&params.values) {
        *s = decay * *s + (1.0 - decay) * p;
    }
    Ok(())
}

/// `½‖θ‖²` and its gradient `θ`.
pub fn half_sq_norm(params: &ParamSet) -> (f64, Vec<f64>) {
    let v = 0.5 * params.values.iter().map(|x| x * x).sum::<f64>();
    (v, params.values.clone())
}

/// Global-norm gradient clipping; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}
