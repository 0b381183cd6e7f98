use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{check_prob, check_scale, gauss, Task, TaskError};

/// `x' = A x + B u + w`, `y = C x + v` with diagonal `Q`, `R`; `u ~ N(0, σ_u² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DVector<f64>,
    pub r: DVector<f64>,
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
}

impl LinearModel {
    /// Stationary covariance of `x` under the control policy, by fixed-point iteration.
    pub fn stationary_cov(a: &DMatrix<f64>, drive: &DMatrix<f64>) -> DMatrix<f64> {
        let mut p = drive.clone();
        for _ in 0..10_000 {
            let next = a * &p * a.transpose() + drive;
            let diff = (&next - &p).abs().max();
            p = next;
            if diff < 1e-14 {
                break;
            }
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearGaussianParams {
    /// 1 (scalar AR(1) system) or 4 (damped planar constant-velocity system).
    pub dim: usize,
    pub process_std: f64,
    pub meas_std: f64,
    pub control_std: f64,
    pub obs_availability: f64,
}

impl Default for LinearGaussianParams {
    fn default() -> Self {
        LinearGaussianParams {
            dim: 1,
            process_std: 0.5,
            meas_std: 0.2,
            control_std: 0.5,
            obs_availability: 1.0,
        }
    }
}

impl LinearGaussianParams {
    pub fn four_d() -> Self {
        LinearGaussianParams {
            dim: 4,
            process_std: 0.3,
            meas_std: 0.2,
            control_std: 0.3,
            obs_availability: 1.0,
        }
    }
}

/// Linear-Gaussian system started from its stationary distribution.
#[derive(Debug, Clone)]
pub struct LinearGaussian {
    pub params: LinearGaussianParams,
    model: LinearModel,
}

impl LinearGaussian {
    pub fn new(params: LinearGaussianParams) -> Result<Self, TaskError> {
        check_scale(params.process_std, "process_std")?;
        check_scale(params.meas_std, "meas_std")?;
        check_scale(params.control_std, "control_std")?;
        check_prob(params.obs_availability, "obs_availability")?;
        let (a, b, c) = match params.dim {
            1 => (
                DMatrix::from_element(1, 1, 0.9),
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, 1.0),
            ),
            4 => {
                let dt = 0.5;
                #[rustfmt::skip]
                let a = DMatrix::from_row_slice(4, 4, &[
                    0.95, 0.0, dt, 0.0,
                    0.0, 0.95, 0.0, dt,
                    0.0, 0.0, 0.8, 0.0,
                    0.0, 0.0, 0.0, 0.8,
                ]);
                #[rustfmt::skip]
                let b = DMatrix::from_row_slice(4, 2, &[
                    0.0, 0.0,
                    0.0, 0.0,
                    1.0, 0.0,
                    0.0, 1.0,
                ]);
                #[rustfmt::skip]
                let c = DMatrix::from_row_slice(2, 4, &[
                    1.0, 0.0, 0.0, 0.0,
                    0.0, 1.0, 0.0, 0.0,
                ]);
                (a, b, c)
            }
            d => return Err(TaskError::Invalid(format!("linear-gaussian supports dim 1 or 4, got {d}"))),
        };
        let n = a.nrows();
        let q = DVector::from_element(n, params.process_std.powi(2));
        let r = DVector::from_element(c.nrows(), params.meas_std.powi(2));
        let drive = &b * b.transpose() * params.control_std.powi(2) + DMatrix::from_diagonal(&q);
        let prior_cov = LinearModel::stationary_cov(&a, &drive);
        let model = LinearModel {
            a,
            b,
            c,
            q,
            r,
            prior_mean: DVector::zeros(n),
            prior_cov,
        };
        Ok(LinearGaussian { params, model })
    }

    pub fn model(&self) -> &LinearModel {
        &self.model
    }
}

impl Task for LinearGaussian {
    fn name(&self) -> &'static str {
        "linear-gaussian"
    }
    fn state_dim(&self) -> usize {
        self.model.a.nrows()
    }
    fn obs_dim(&self) -> usize {
        self.model.c.nrows()
    }
    fn ctrl_dim(&self) -> usize {
        self.model.b.ncols()
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let n = self.state_dim();
        let l = self
            .model
            .prior_cov
            .clone()
            .cholesky()
            .expect("stationary covariance is positive definite")
            .l();
        let z = DVector::from_iterator(n, (0..n).map(|_| gauss(rng)));
        (&self.model.prior_mean + l * z).iter().copied().collect()
    }

    fn sample_control(&self, _t: usize, _x: &[f64], _u: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        (0..self.ctrl_dim()).map(|_| self.params.control_std * gauss(rng)).collect()
    }

    fn step(&self, x: &[f64], u: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let m = &self.model;
        let next = &m.a * DVector::from_column_slice(x) + &m.b * DVector::from_column_slice(u);
        next.iter()
            .zip(m.q.iter())
            .map(|(v, q)| v + q.sqrt() * gauss(rng))
            .collect()
    }

    fn observe(&self, x: &[f64], _u: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let m = &self.model;
        let y = &m.c * DVector::from_column_slice(x);
        y.iter().zip(m.r.iter()).map(|(v, r)| v + r.sqrt() * gauss(rng)).collect()
    }

    fn obs_availability(&self) -> f64 {
        self.params.obs_availability
    }

    fn transition_log_density(&self, x_next: &[f64], x: &[f64], u: &[f64]) -> Option<f64> {
        let m = &self.model;
        let mean = &m.a * DVector::from_column_slice(x) + &m.b * DVector::from_column_slice(u);
        Some(
            x_next
                .iter()
                .zip(mean.iter())
                .zip(m.q.iter())
                .map(|((xn, mu), q)| super::log_normal(*xn, *mu, *q))
                .sum(),
        )
    }

    fn measurement_log_density(&self, y: &[f64], x: &[f64], _u: &[f64]) -> Option<f64> {
        let m = &self.model;
        let mean = &m.c * DVector::from_column_slice(x);
        Some(
            y.iter()
                .zip(mean.iter())
                .zip(m.r.iter())
                .map(|((yv, mu), r)| super::log_normal(*yv, *mu, *r))
                .sum(),
        )
    }

    fn prior_log_density(&self, x: &[f64]) -> Option<f64> {
        let m = &self.model;
        let chol = m.prior_cov.clone().cholesky()?;
        let r = DVector::from_column_slice(x) - &m.prior_mean;
        let maha = (r.transpose() * chol.inverse() * &r)[(0, 0)];
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let n = x.len() as f64;
        Some(-0.5 * (maha + log_det + n * (2.0 * std::f64::consts::PI).ln()))
    }

    fn linear_model(&self) -> Option<LinearModel> {
        Some(self.model.clone())
    }
}
