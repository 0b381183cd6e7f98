use std::f64::consts::PI;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{check_prob, check_scale, gauss, Task, TaskError};

/// A disk spinning on a circle and a compliant point agent that cannot enter it.
///
/// State is `(a_x, a_y, cos φ, sin φ)`. The object centre `r(cos φ, sin φ)`
/// advances by `ω` per step. The agent moves toward the commanded `u` with
/// gain `k` and is projected onto the disk boundary when it would penetrate.
/// Measurements are `y = (a, u − a)` plus noise, so the object is only
/// visible through contact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpinContactParams {
    pub circle_radius: f64,
    pub object_radius: f64,
    pub omega: f64,
    pub angle_std: f64,
    pub agent_gain: f64,
    pub agent_std: f64,
    pub meas_std: f64,
    pub command_step: f64,
    pub command_min_radius: f64,
    pub command_max_radius: f64,
    pub obs_availability: f64,
}

impl Default for SpinContactParams {
    fn default() -> Self {
        SpinContactParams {
            circle_radius: 1.0,
            object_radius: 0.4,
            omega: 0.1,
            angle_std: 0.0,
            agent_gain: 0.7,
            agent_std: 0.01,
            meas_std: 0.01,
            command_step: 0.25,
            command_min_radius: 0.6,
            command_max_radius: 1.4,
            obs_availability: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpinContact {
    pub params: SpinContactParams,
}

impl SpinContact {
    pub fn new(params: SpinContactParams) -> Result<Self, TaskError> {
        for (v, n) in [
            (params.circle_radius, "circle_radius"),
            (params.object_radius, "object_radius"),
            (params.angle_std, "angle_std"),
            (params.agent_gain, "agent_gain"),
            (params.agent_std, "agent_std"),
            (params.meas_std, "meas_std"),
            (params.command_step, "command_step"),
            (params.command_min_radius, "command_min_radius"),
            (params.command_max_radius, "command_max_radius"),
        ] {
            check_scale(v, n)?;
        }
        if !params.omega.is_finite() {
            return Err(TaskError::Invalid("omega must be finite".into()));
        }
        if params.command_min_radius > params.command_max_radius {
            return Err(TaskError::Invalid("command_min_radius exceeds command_max_radius".into()));
        }
        check_prob(params.obs_availability, "obs_availability")?;
        Ok(SpinContact { params })
    }

    pub fn object_center(&self, x: &[f64]) -> [f64; 2] {
        let phi = x[3].atan2(x[2]);
        let r = self.params.circle_radius;
        [r * phi.cos(), r * phi.sin()]
    }

    /// Push `a` out of the disk centred at `o`.
    pub fn project(&self, a: [f64; 2], o: [f64; 2], fallback: [f64; 2]) -> [f64; 2] {
        let rho = self.params.object_radius;
        let (dx, dy) = (a[0] - o[0], a[1] - o[1]);
        let d = dx.hypot(dy);
        if d >= rho {
            return a;
        }
        let (ux, uy) = if d > 1e-12 {
            (dx / d, dy / d)
        } else {
            let (fx, fy) = (fallback[0] - o[0], fallback[1] - o[1]);
            let f = fx.hypot(fy);
            if f > 1e-12 {
                (fx / f, fy / f)
            } else {
                (1.0, 0.0)
            }
        };
        [o[0] + rho * ux, o[1] + rho * uy]
    }

    /// Agent position after one compliant step from `a` toward `u` with
    /// noise `w`, against the object at angle `phi`.
    pub fn agent_step(&self, a: [f64; 2], u: &[f64], phi: f64, w: [f64; 2]) -> [f64; 2] {
        let k = self.params.agent_gain;
        let free = [a[0] + k * (u[0] - a[0]) + w[0], a[1] + k * (u[1] - a[1]) + w[1]];
        let r = self.params.circle_radius;
        self.project(free, [r * phi.cos(), r * phi.sin()], a)
    }

    /// Whether the agent touches the object disk (within `tol`).
    pub fn in_contact(&self, x: &[f64], tol: f64) -> bool {
        let o = self.object_center(x);
        (x[0] - o[0]).hypot(x[1] - o[1]) <= self.params.object_radius + tol
    }

    /// Grid posterior over the initial object angle given a rollout, with the
    /// agent trajectory taken as known. Returns `(grid, probabilities)`.
    pub fn phase_posterior(&self, x: &[Vec<f64>], u: &[Vec<f64>], n_grid: usize) -> (Vec<f64>, Vec<f64>) {
        let p = &self.params;
        let var = (p.agent_std * p.agent_std).max(1e-12);
        let grid: Vec<f64> = (0..n_grid).map(|i| 2.0 * PI * i as f64 / n_grid as f64).collect();
        let mut logp: Vec<f64> = grid
            .iter()
            .map(|&phi0| {
                let mut lp = 0.0;
                let a0 = [x[0][0], x[0][1]];
                let o0 = [p.circle_radius * phi0.cos(), p.circle_radius * phi0.sin()];
                if (a0[0] - o0[0]).hypot(a0[1] - o0[1]) < p.object_radius - 1e-9 {
                    return f64::NEG_INFINITY;
                }
                for t in 1..x.len() {
                    let phi = phi0 + p.omega * t as f64;
                    let pred = self.agent_step([x[t - 1][0], x[t - 1][1]], &u[t], phi, [0.0, 0.0]);
                    let (ex, ey) = (x[t][0] - pred[0], x[t][1] - pred[1]);
                    lp -= 0.5 * (ex * ex + ey * ey) / var;
                }
                lp
            })
            .collect();
        let m = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in logp.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in logp.iter_mut() {
            *v /= z;
        }
        (grid, logp)
    }
}

impl Task for SpinContact {
    fn name(&self) -> &'static str {
        "spin-contact"
    }
    fn state_dim(&self) -> usize {
        4
    }
    fn obs_dim(&self) -> usize {
        4
    }
    fn ctrl_dim(&self) -> usize {
        2
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let p = &self.params;
        let phi: f64 = rng.random_range(0.0..2.0 * PI);
        let ang: f64 = rng.random_range(0.0..2.0 * PI);
        let rad: f64 = rng.random_range(p.command_min_radius..=p.command_max_radius);
        let o = [p.circle_radius * phi.cos(), p.circle_radius * phi.sin()];
        let a = self.project([rad * ang.cos(), rad * ang.sin()], o, [0.0, 0.0]);
        vec![a[0], a[1], phi.cos(), phi.sin()]
    }

    fn initial_control(&self, x0: &[f64]) -> Vec<f64> {
        vec![x0[0], x0[1]]
    }

    fn sample_control(&self, _t: usize, _x: &[f64], u_prev: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let p = &self.params;
        let mut u = [
            u_prev[0] + p.command_step * gauss(rng),
            u_prev[1] + p.command_step * gauss(rng),
        ];
        let r = u[0].hypot(u[1]);
        if r < 1e-12 {
            u = [p.command_min_radius, 0.0];
        } else {
            let c = r.clamp(p.command_min_radius, p.command_max_radius) / r;
            u = [u[0] * c, u[1] * c];
        }
        u.to_vec()
    }

    fn step(&self, x: &[f64], u: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let p = &self.params;
        let phi = x[3].atan2(x[2]) + p.omega + p.angle_std * gauss(rng);
        let w = [p.agent_std * gauss(rng), p.agent_std * gauss(rng)];
        let a = self.agent_step([x[0], x[1]], u, phi, w);
        vec![a[0], a[1], phi.cos(), phi.sin()]
    }

    fn observe(&self, x: &[f64], u: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let s = self.params.meas_std;
        vec![
            x[0] + s * gauss(rng),
            x[1] + s * gauss(rng),
            u[0] - x[0] + s * gauss(rng),
            u[1] - x[1] + s * gauss(rng),
        ]
    }

    fn obs_availability(&self) -> f64 {
        self.params.obs_availability
    }
}
