use rayon::prelude::*;

use super::{log_sum_exp, EvalError};
use crate::tasks::{RolloutRecord, Task};

/// Edge mass above which a leakage warning is raised.
const LEAK_TOL: f64 = 0.01;

/// Regular grid of cell centres over a 1-D or 2-D box.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: Vec<usize>,
}

impl GridSpec {
    pub fn new_1d(lo: f64, hi: f64, n: usize) -> Self {
        GridSpec {
            lo: vec![lo],
            hi: vec![hi],
            n: vec![n],
        }
    }

    pub fn cell(&self, d: usize) -> f64 {
        (self.hi[d] - self.lo[d]) / self.n[d] as f64
    }

    fn coord(&self, d: usize, k: usize) -> f64 {
        self.lo[d] + (k as f64 + 0.5) * self.cell(d)
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        match self.n.len() {
            1 => (0..self.n[0]).map(|i| vec![self.coord(0, i)]).collect(),
            _ => (0..self.n[0])
                .flat_map(|i| (0..self.n[1]).map(move |j| (i, j)))
                .map(|(i, j)| vec![self.coord(0, i), self.coord(1, j)])
                .collect(),
        }
    }

    fn is_edge(&self, idx: usize) -> bool {
        match self.n.len() {
            1 => idx == 0 || idx + 1 == self.n[0],
            _ => {
                let (i, j) = (idx / self.n[1], idx % self.n[1]);
                i == 0 || j == 0 || i + 1 == self.n[0] || j + 1 == self.n[1]
            }
        }
    }

    fn validate(&self, dim: usize) -> Result<(), EvalError> {
        if !(1..=2).contains(&dim) {
            return Err(EvalError::Invalid("grid filter supports state dimension 1 or 2".into()));
        }
        if self.lo.len() != dim || self.hi.len() != dim || self.n.len() != dim {
            return Err(EvalError::Invalid("grid spec does not match the state dimension".into()));
        }
        if self.n.iter().any(|&n| n < 3) || self.lo.iter().zip(&self.hi).any(|(l, h)| !(h > l)) {
            return Err(EvalError::Invalid("grid needs at least 3 cells and hi > lo per axis".into()));
        }
        Ok(())
    }
}

/// Discretized filtering posteriors, one probability vector per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPosterior {
    pub points: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    /// Mass in the outermost cells per step.
    pub edge_mass: Vec<f64>,
    pub warnings: Vec<String>,
}

impl GridPosterior {
    pub fn mean(&self, t: usize) -> Vec<f64> {
        let d = self.points[0].len();
        let mut m = vec![0.0; d];
        for (p, w) in self.points.iter().zip(&self.probs[t]) {
            for k in 0..d {
                m[k] += w * p[k];
            }
        }
        m
    }

    pub fn variance(&self, t: usize) -> Vec<f64> {
        let m = self.mean(t);
        let mut v = vec![0.0; m.len()];
        for (p, w) in self.points.iter().zip(&self.probs[t]) {
            for k in 0..m.len() {
                v[k] += w * (p[k] - m[k]).powi(2);
            }
        }
        v
    }

    /// Posterior mass of the cells satisfying `pred`.
    pub fn mass_where(&self, t: usize, pred: impl Fn(&[f64]) -> bool) -> f64 {
        self.points.iter().zip(&self.probs[t]).filter(|(p, _)| pred(p)).map(|(_, w)| w).sum()
    }
}

fn normalize_log(logp: &[f64]) -> Result<Vec<f64>, EvalError> {
    let z = log_sum_exp(logp);
    if !z.is_finite() {
        return Err(EvalError::Invalid("grid posterior has no mass".into()));
    }
    Ok(logp.iter().map(|l| (l - z).exp()).collect())
}

/// Pointwise Bayes recursion on a fixed grid using the task's own densities.
pub fn grid_filter(task: &dyn Task, rec: &RolloutRecord, spec: &GridSpec) -> Result<GridPosterior, EvalError> {
    spec.validate(task.state_dim())?;
    let points = spec.points();
    let missing = || EvalError::Invalid(format!("{} does not expose its densities", task.name()));
    let like = |t: usize, x: &[f64]| -> Result<f64, EvalError> {
        if rec.obs[t] {
            task.measurement_log_density(&rec.y[t], x, &rec.u[t]).ok_or_else(missing)
        } else {
            Ok(0.0)
        }
    };
    let mut logp = Vec::with_capacity(points.len());
    for x in &points {
        logp.push(task.prior_log_density(x).ok_or_else(missing)? + like(0, x)?);
    }
    let mut probs = vec![normalize_log(&logp)?];
    for t in 1..rec.x.len() {
        let prev = &probs[t - 1];
        let u = &rec.u[t];
        let pred: Vec<f64> = points
            .par_iter()
            .map(|xn| {
                let terms: Vec<f64> = points
                    .iter()
                    .zip(prev)
                    .filter(|(_, w)| **w > 0.0)
                    .map(|(xp, w)| w.ln() + task.transition_log_density(xn, xp, u).unwrap_or(f64::NAN))
                    .collect();
                log_sum_exp(&terms)
            })
            .collect();
        if pred.iter().any(|v| v.is_nan()) {
            return Err(missing());
        }
        let mut logp = Vec::with_capacity(points.len());
        for (x, p) in points.iter().zip(&pred) {
            logp.push(p + like(t, x)?);
        }
        probs.push(normalize_log(&logp)?);
    }
    let edge_mass: Vec<f64> = probs
        .iter()
        .map(|p| p.iter().enumerate().filter(|(i, _)| spec.is_edge(*i)).map(|(_, w)| w).sum())
        .collect();
    let warnings = edge_mass
        .iter()
        .enumerate()
        .filter(|(_, m)| **m > LEAK_TOL)
        .map(|(t, m)| format!("t={t}: {:.2}% of the mass is in edge cells; widen the grid", 100.0 * m))
        .collect();
    Ok(GridPosterior {
        points,
        probs,
        edge_mass,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::kalman_for_task;
    use crate::tasks::{simulate_rollout, AbsBimodal, AbsBimodalParams, LinearGaussian, LinearGaussianParams};

    #[test]
    fn matches_kalman_on_scalar_linear_task() {
        let task = LinearGaussian::new(LinearGaussianParams::default()).unwrap();
        let rec = simulate_rollout(&task, 1, 20);
        let spec = GridSpec::new_1d(-5.0, 5.0, 500);
        let g = grid_filter(&task, &rec, &spec).unwrap();
        let k = kalman_for_task(&task, &rec).unwrap();
        for t in 0..=20 {
            assert!((g.probs[t].iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((g.mean(t)[0] - k[t].mean[0]).abs() < spec.cell(0), "t={t}");
        }
        assert!(g.warnings.is_empty());
    }

    #[test]
    fn bimodal_posterior_is_symmetric() {
        let task = AbsBimodal::new(AbsBimodalParams::default()).unwrap();
        let mut rec = simulate_rollout(&task, 2, 5);
        for u in rec.u.iter_mut() {
            u[0] = 0.0;
        }
        let g = grid_filter(&task, &rec, &GridSpec::new_1d(-4.0, 4.0, 400)).unwrap();
        for t in 0..=5 {
            let p = &g.probs[t];
            for i in 0..200 {
                assert!((p[i] - p[399 - i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn narrow_grid_warns() {
        let task = LinearGaussian::new(LinearGaussianParams::default()).unwrap();
        let rec = simulate_rollout(&task, 1, 5);
        let g = grid_filter(&task, &rec, &GridSpec::new_1d(-0.05, 0.05, 5)).unwrap();
        assert!(!g.warnings.is_empty());
    }
}
