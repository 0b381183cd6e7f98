use nalgebra::{DMatrix, DVector};

use super::{ModelError, NoiseMode, ScoreModel};
use crate::diffusion::{GaussianDynOut, NoiseSchedule};
use crate::tasks::{GaussianConditional, LinearModel, NormStats};

/// Closed-form scores for Gaussian targets, in normalized units.
///
/// Conditional target `N(G y + c, P_c)`, unconditional target `N(m₀, P₀)`,
/// dynamics `N(A x + B u + d, diag(q))`. The optimal noise prediction for a
/// Gaussian `N(m, P)` at level `s` is `β (α² P + β² I)⁻¹ (x_s − α m)`.
#[derive(Debug, Clone)]
pub struct GaussianScores {
    pub dx: usize,
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub cond_cov: DMatrix<f64>,
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
    pub dyn_a: DMatrix<f64>,
    pub dyn_b: DMatrix<f64>,
    pub dyn_d: DVector<f64>,
    pub dyn_var: Vec<f64>,
    pub schedule: NoiseSchedule,
}

/// Per-level precomputed solves for one timestep.
#[derive(Debug, Clone)]
pub struct AnalyticContext {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    cond: Option<(DVector<f64>, Vec<DMatrix<f64>>)>,
    uncond: (DVector<f64>, Vec<DMatrix<f64>>),
}

fn perturbed_inverses(cov: &DMatrix<f64>, alpha: &[f64], beta: &[f64]) -> Result<Vec<DMatrix<f64>>, ModelError> {
    let n = cov.nrows();
    alpha
        .iter()
        .zip(beta)
        .map(|(a, b)| {
            let m = cov * (a * a) + DMatrix::identity(n, n) * (b * b);
            m.cholesky()
                .map(|c| c.inverse())
                .ok_or_else(|| ModelError::Invalid("perturbed covariance is not positive definite".into()))
        })
        .collect()
}

impl GaussianScores {
    /// Scores of a linear-Gaussian task whose data prior is the stationary
    /// distribution, expressed in the units of `stats`.
    pub fn linear_task(model: &LinearModel, stats: &NormStats) -> Result<Self, ModelError> {
        let sx = DVector::from_column_slice(&stats.x.std);
        let mx = DVector::from_column_slice(&stats.x.mean);
        let sy = DVector::from_column_slice(&stats.y.std);
        let my = DVector::from_column_slice(&stats.y.mean);
        let su = DVector::from_column_slice(&stats.u.std);
        let mu = DVector::from_column_slice(&stats.u.mean);
        let sx_inv = DMatrix::from_diagonal(&sx.map(|v| 1.0 / v));

        let p0_inv = model
            .prior_cov
            .clone()
            .try_inverse()
            .ok_or_else(|| ModelError::Invalid("singular prior covariance".into()))?;
        let r_inv = DMatrix::from_diagonal(&model.r.map(|v| 1.0 / v));
        let post = (&p0_inv + model.c.transpose() * &r_inv * &model.c)
            .try_inverse()
            .ok_or_else(|| ModelError::Invalid("singular posterior precision".into()))?;
        // m(y) = Pp P0⁻¹ m0 + Pp Cᵀ R⁻¹ y with y = S_y y_n + μ_y
        let k = &post * model.c.transpose() * &r_inv;
        let raw_offset = &post * &p0_inv * &model.prior_mean + &k * &my;
        let gain = &sx_inv * &k * DMatrix::from_diagonal(&sy);
        let offset = &sx_inv * (raw_offset - &mx);
        let cond_cov = &sx_inv * &post * &sx_inv;
        let prior_mean = &sx_inv * (&model.prior_mean - &mx);
        let prior_cov = &sx_inv * &model.prior_cov * &sx_inv;

        let dyn_a = &sx_inv * &model.a * DMatrix::from_diagonal(&sx);
        let dyn_b = &sx_inv * &model.b * DMatrix::from_diagonal(&su);
        let dyn_d = &sx_inv * (&model.a * &mx + &model.b * &mu - &mx);
        let dyn_var = model.q.iter().zip(sx.iter()).map(|(q, s)| q / (s * s)).collect();
        Ok(GaussianScores {
            dx: model.a.nrows(),
            gain,
            offset,
            cond_cov,
            prior_mean,
            prior_cov,
            dyn_a,
            dyn_b,
            dyn_d,
            dyn_var,
            schedule: NoiseSchedule::new(50)?,
        })
    }

    /// Scores of the static Gaussian conditional pairs (unit normalization).
    /// The dynamics are the identity with unit variance.
    pub fn conditional_pairs(task: &GaussianConditional) -> Result<Self, ModelError> {
        Ok(GaussianScores {
            dx: 1,
            gain: DMatrix::from_element(1, 1, 1.0),
            offset: DVector::zeros(1),
            cond_cov: DMatrix::from_element(1, 1, task.sigma * task.sigma),
            prior_mean: DVector::zeros(1),
            prior_cov: DMatrix::from_element(1, 1, task.marginal_var()),
            dyn_a: DMatrix::identity(1, 1),
            dyn_b: DMatrix::zeros(1, 0),
            dyn_d: DVector::zeros(1),
            dyn_var: vec![1.0],
            schedule: NoiseSchedule::new(50)?,
        })
    }

    pub fn conditional_mean(&self, y: &[f64]) -> DVector<f64> {
        &self.gain * DVector::from_column_slice(y) + &self.offset
    }
}

impl ScoreModel for GaussianScores {
    type Context = AnalyticContext;

    fn state_dim(&self) -> usize {
        self.dx
    }

    fn predict_dynamics(&self, x_prev: &[f64], u: &[f64]) -> Result<GaussianDynOut, ModelError> {
        if x_prev.len() != self.dx || u.len() != self.dyn_b.ncols() {
            return Err(ModelError::Dimension("dynamics input".into()));
        }
        let mean = &self.dyn_a * DVector::from_column_slice(x_prev)
            + &self.dyn_b * DVector::from_column_slice(u)
            + &self.dyn_d;
        Ok(GaussianDynOut {
            mean: mean.iter().copied().collect(),
            var: self.dyn_var.clone(),
        })
    }

    fn prepare(&self, obs: Option<(&[f64], &[f64])>, levels: &[f64]) -> Result<AnalyticContext, ModelError> {
        let mut alpha = Vec::with_capacity(levels.len());
        let mut beta = Vec::with_capacity(levels.len());
        for &s in levels {
            let (a, b) = self.schedule.alpha_beta(s)?;
            alpha.push(a);
            beta.push(b);
        }
        let cond = match obs {
            Some((y, _)) => Some((
                self.conditional_mean(y),
                perturbed_inverses(&self.cond_cov, &alpha, &beta)?,
            )),
            None => None,
        };
        let uncond = (self.prior_mean.clone(), perturbed_inverses(&self.prior_cov, &alpha, &beta)?);
        Ok(AnalyticContext {
            alpha,
            beta,
            cond,
            uncond,
        })
    }

    fn predict_noise(
        &self,
        ctx: &AnalyticContext,
        level: usize,
        mode: NoiseMode,
        x_s: &[f64],
        batch: usize,
        out: &mut [f64],
    ) -> Result<(), ModelError> {
        let (mean, inv) = match (mode, &ctx.cond) {
            (NoiseMode::Conditional, Some(c)) => c,
            (NoiseMode::Conditional, None) => {
                return Err(ModelError::Invalid("conditional noise requested without an observation".into()))
            }
            (NoiseMode::Unconditional, _) => &ctx.uncond,
        };
        let (a, b) = (ctx.alpha[level], ctx.beta[level]);
        let inv = &inv[level];
        let d = self.dx;
        if x_s.len() != batch * d || out.len() != batch * d {
            return Err(ModelError::Dimension("noise batch".into()));
        }
        let mut r = vec![0.0; d];
        for (xi, oi) in x_s.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            for j in 0..d {
                r[j] = xi[j] - a * mean[j];
            }
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += inv[(i, j)] * r[j];
                }
                oi[i] = b * acc;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{LinearGaussian, LinearGaussianParams, Task};

    #[test]
    fn scalar_conditional_matches_closed_form() {
        let task = GaussianConditional::default();
        let m = GaussianScores::conditional_pairs(&task).unwrap();
        let levels = [0.3, 0.6, 0.9];
        let ctx = m.prepare(Some((&[0.7], &[0.7])), &levels).unwrap();
        for (k, &s) in levels.iter().enumerate() {
            let (a, b) = m.schedule.alpha_beta(s).unwrap();
            let mut out = [0.0];
            m.predict_noise(&ctx, k, NoiseMode::Conditional, &[0.2], 1, &mut out).unwrap();
            assert!((out[0] - task.conditional_noise(0.2, 0.7, a, b)).abs() < 1e-12);
            m.predict_noise(&ctx, k, NoiseMode::Unconditional, &[0.2], 1, &mut out).unwrap();
            assert!((out[0] - task.marginal_noise(0.2, a, b)).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_normalization_reproduces_raw_model() {
        let task = LinearGaussian::new(LinearGaussianParams::four_d()).unwrap();
        let lm = task.linear_model().unwrap();
        let m = GaussianScores::linear_task(&lm, &NormStats::identity(4, 2, 2)).unwrap();
        let d = m.predict_dynamics(&[1.0, 2.0, 3.0, 4.0], &[0.5, -0.5]).unwrap();
        let expect = &lm.a * DVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0])
            + &lm.b * DVector::from_column_slice(&[0.5, -0.5]);
        for i in 0..4 {
            assert!((d.mean[i] - expect[i]).abs() < 1e-12);
        }
        // scalar conjugate update: posterior mean P0 y / (P0 + R)
        let t1 = LinearGaussian::new(LinearGaussianParams::default()).unwrap();
        let l1 = t1.linear_model().unwrap();
        let m1 = GaussianScores::linear_task(&l1, &NormStats::identity(1, 1, 1)).unwrap();
        let (p0, r) = (l1.prior_cov[(0, 0)], l1.r[0]);
        assert!((m1.conditional_mean(&[1.0])[0] - p0 / (p0 + r)).abs() < 1e-12);
        assert!((m1.cond_cov[(0, 0)] - p0 * r / (p0 + r)).abs() < 1e-12);
    }
}
