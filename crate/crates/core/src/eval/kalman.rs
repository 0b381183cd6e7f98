use nalgebra::{DMatrix, DVector};

use super::EvalError;
use crate::tasks::{LinearModel, RolloutRecord, Task};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn update(p: &GaussianPosterior, m: &LinearModel, y: &[f64]) -> Result<GaussianPosterior, EvalError> {
    let s = &m.c * &p.cov * m.c.transpose() + DMatrix::from_diagonal(&m.r);
    let s_inv = s
        .cholesky()
        .ok_or_else(|| EvalError::Invalid("innovation covariance not positive definite".into()))?
        .inverse();
    let k = &p.cov * m.c.transpose() * s_inv;
    let resid = DVector::from_column_slice(y) - &m.c * &p.mean;
    let n = p.cov.nrows();
    // Joseph form keeps the covariance symmetric positive definite.
    let ikc = DMatrix::identity(n, n) - &k * &m.c;
    let cov = &ikc * &p.cov * ikc.transpose() + &k * DMatrix::from_diagonal(&m.r) * k.transpose();
    Ok(GaussianPosterior {
        mean: &p.mean + &k * resid,
        cov: (&cov + cov.transpose()) * 0.5,
    })
}

/// Exact filtering posteriors `p(x_t | y_{0:t}, u_{1:t})` for `t = 0..=T`.
/// `y[t]` is `None` where no observation is available; `u[0]` is unused.
pub fn kalman_filter(m: &LinearModel, y: &[Option<Vec<f64>>], u: &[Vec<f64>]) -> Result<Vec<GaussianPosterior>, EvalError> {
    if y.len() != u.len() {
        return Err(EvalError::Invalid("observation and control sequences differ in length".into()));
    }
    let mut out = Vec::with_capacity(y.len());
    let mut p = GaussianPosterior {
        mean: m.prior_mean.clone(),
        cov: m.prior_cov.clone(),
    };
    for t in 0..y.len() {
        if t > 0 {
            let q = DMatrix::from_diagonal(&m.q);
            p = GaussianPosterior {
                mean: &m.a * &p.mean + &m.b * DVector::from_column_slice(&u[t]),
                cov: &m.a * &p.cov * m.a.transpose() + q,
            };
        }
        if let Some(obs) = &y[t] {
            p = update(&p, m, obs)?;
        }
        out.push(p.clone());
    }
    Ok(out)
}

/// [`kalman_filter`] on a recorded rollout; errors for non-linear tasks.
pub fn kalman_for_task(task: &dyn Task, rec: &RolloutRecord) -> Result<Vec<GaussianPosterior>, EvalError> {
    let m = task
        .linear_model()
        .ok_or_else(|| EvalError::Invalid(format!("{} is not a linear-Gaussian task", task.name())))?;
    let y: Vec<Option<Vec<f64>>> = rec.y.iter().zip(&rec.obs).map(|(y, o)| o.then(|| y.clone())).collect();
    kalman_filter(&m, &y, &rec.u)
}
