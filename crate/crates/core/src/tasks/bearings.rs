use std::f64::consts::PI;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{check_prob, check_scale, gauss, log_normal, Task, TaskError};

/// Planar target `(px, py, vx, vy)` seen only through its bearing from a moving observer.
///
/// The control is the observer position. The bearing is reported as
/// `(cos θ, sin θ)` to avoid the wrap at ±π.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BearingsOnlyParams {
    pub dt: f64,
    pub velocity_decay: f64,
    pub position_std: f64,
    pub velocity_std: f64,
    pub bearing_std: f64,
    pub prior_center: [f64; 2],
    pub prior_position_std: f64,
    pub prior_velocity_std: f64,
    pub observer_radius: f64,
    pub observer_rate: f64,
    pub observer_jitter: f64,
    pub obs_availability: f64,
}

impl Default for BearingsOnlyParams {
    fn default() -> Self {
        BearingsOnlyParams {
            dt: 1.0,
            velocity_decay: 0.98,
            position_std: 0.01,
            velocity_std: 0.05,
            bearing_std: 0.05,
            prior_center: [3.0, 3.0],
            prior_position_std: 1.0,
            prior_velocity_std: 0.2,
            observer_radius: 2.0,
            observer_rate: 0.2,
            observer_jitter: 0.1,
            obs_availability: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BearingsOnly {
    pub params: BearingsOnlyParams,
}

impl BearingsOnly {
    pub fn new(params: BearingsOnlyParams) -> Result<Self, TaskError> {
        for (v, n) in [
            (params.dt, "dt"),
            (params.position_std, "position_std"),
            (params.velocity_std, "velocity_std"),
            (params.bearing_std, "bearing_std"),
            (params.prior_position_std, "prior_position_std"),
            (params.prior_velocity_std, "prior_velocity_std"),
            (params.observer_radius, "observer_radius"),
            (params.observer_jitter, "observer_jitter"),
        ] {
            check_scale(v, n)?;
        }
        check_prob(params.obs_availability, "obs_availability")?;
        Ok(BearingsOnly { params })
    }

    pub fn bearing(x: &[f64], observer: &[f64]) -> f64 {
        (x[1] - observer[1]).atan2(x[0] - observer[0])
    }
}

pub(crate) fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

impl Task for BearingsOnly {
    fn name(&self) -> &'static str {
        "bearings-only"
    }
    fn state_dim(&self) -> usize {
        4
    }
    fn obs_dim(&self) -> usize {
        2
    }
    fn ctrl_dim(&self) -> usize {
        2
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let p = &self.params;
        vec![
            p.prior_center[0] + p.prior_position_std * gauss(rng),
            p.prior_center[1] + p.prior_position_std * gauss(rng),
            p.prior_velocity_std * gauss(rng),
            p.prior_velocity_std * gauss(rng),
        ]
    }

    fn initial_control(&self, _x0: &[f64]) -> Vec<f64> {
        vec![self.params.observer_radius, 0.0]
    }

    fn sample_control(&self, t: usize, _x: &[f64], _u: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let p = &self.params;
        let phase = p.observer_rate * t as f64;
        let r = p.observer_radius + p.observer_jitter * gauss(rng);
        vec![r * phase.cos(), r * phase.sin()]
    }

    fn step(&self, x: &[f64], _u: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let p = &self.params;
        vec![
            x[0] + p.dt * x[2] + p.position_std * gauss(rng),
            x[1] + p.dt * x[3] + p.position_std * gauss(rng),
            p.velocity_decay * x[2] + p.velocity_std * gauss(rng),
            p.velocity_decay * x[3] + p.velocity_std * gauss(rng),
        ]
    }

    fn observe(&self, x: &[f64], u: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let th = Self::bearing(x, u) + self.params.bearing_std * gauss(rng);
        vec![th.cos(), th.sin()]
    }

    fn obs_availability(&self) -> f64 {
        self.params.obs_availability
    }

    fn transition_log_density(&self, x_next: &[f64], x: &[f64], _u: &[f64]) -> Option<f64> {
        let p = &self.params;
        let (sp, sv) = (p.position_std.powi(2), p.velocity_std.powi(2));
        Some(
            log_normal(x_next[0], x[0] + p.dt * x[2], sp)
                + log_normal(x_next[1], x[1] + p.dt * x[3], sp)
                + log_normal(x_next[2], p.velocity_decay * x[2], sv)
                + log_normal(x_next[3], p.velocity_decay * x[3], sv),
        )
    }

    /// Density of the bearing angle; the wrapped tail mass is ignored.
    fn measurement_log_density(&self, y: &[f64], x: &[f64], u: &[f64]) -> Option<f64> {
        let observed = y[1].atan2(y[0]);
        let d = wrap_angle(observed - Self::bearing(x, u));
        Some(log_normal(d, 0.0, self.params.bearing_std.powi(2)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        for a in [-7.0, -PI, -1.0, 0.0, 3.0, PI, 9.5] {
            let w = wrap_angle(a);
            assert!(w > -PI && w <= PI);
            assert!(((a - w) / (2.0 * PI)).fract().abs() < 1e-9 || ((a - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }
}
