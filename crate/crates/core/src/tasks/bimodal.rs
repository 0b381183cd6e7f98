use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{check_prob, check_scale, gauss, log_normal, Task, TaskError};

/// Scalar random walk `x' = x + u + w` observed through `y = |x| + v`.
///
/// The sign of `x` is invisible to a single measurement; only the dynamics
/// can disambiguate it, which makes the posterior bimodal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbsBimodalParams {
    pub process_std: f64,
    pub meas_std: f64,
    pub prior_std: f64,
    pub control_std: f64,
    pub obs_availability: f64,
}

impl Default for AbsBimodalParams {
    fn default() -> Self {
        AbsBimodalParams {
            process_std: 0.05,
            meas_std: 0.05,
            prior_std: 1.0,
            control_std: 0.1,
            obs_availability: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AbsBimodal {
    pub params: AbsBimodalParams,
}

impl AbsBimodal {
    pub fn new(params: AbsBimodalParams) -> Result<Self, TaskError> {
        check_scale(params.process_std, "process_std")?;
        check_scale(params.meas_std, "meas_std")?;
        check_scale(params.prior_std, "prior_std")?;
        check_scale(params.control_std, "control_std")?;
        check_prob(params.obs_availability, "obs_availability")?;
        Ok(AbsBimodal { params })
    }
}

impl Task for AbsBimodal {
    fn name(&self) -> &'static str {
        "abs-bimodal"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn ctrl_dim(&self) -> usize {
        1
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![self.params.prior_std * gauss(rng)]
    }

    fn sample_control(&self, _t: usize, _x: &[f64], _u: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        vec![self.params.control_std * gauss(rng)]
    }

    fn step(&self, x: &[f64], u: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        vec![x[0] + u[0] + self.params.process_std * gauss(rng)]
    }

    fn observe(&self, x: &[f64], _u: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        vec![x[0].abs() + self.params.meas_std * gauss(rng)]
    }

    fn obs_availability(&self) -> f64 {
        self.params.obs_availability
    }

    fn transition_log_density(&self, x_next: &[f64], x: &[f64], u: &[f64]) -> Option<f64> {
        Some(log_normal(x_next[0], x[0] + u[0], self.params.process_std.powi(2)))
    }

    fn measurement_log_density(&self, y: &[f64], x: &[f64], _u: &[f64]) -> Option<f64> {
        Some(log_normal(y[0], x[0].abs(), self.params.meas_std.powi(2)))
    }

    fn prior_log_density(&self, x: &[f64]) -> Option<f64> {
        Some(log_normal(x[0], 0.0, self.params.prior_std.powi(2)))
    }
}
