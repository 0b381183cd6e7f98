use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::FilterError;
use crate::diffusion::NoiseSchedule;
use crate::tasks::DimStats;

/// Below this `α_s` the sensor term is skipped: the clean-point estimate
/// `x_s/α_s` is too unreliable.
pub const ALPHA_MIN: f64 = 0.05;

/// Affine Gaussian sensor `ŷ = H x + b + v`, `v ~ N(0, diag(R))`, in the
/// filter's (normalized) state units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSensorModel {
    /// `dim ŷ × dim x`, row-major.
    pub h: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub r: Vec<f64>,
}

impl GaussianSensorModel {
    pub fn validate(&self, dx: usize) -> Result<(), FilterError> {
        let m = self.r.len();
        if self.h.len() != m || self.offset.len() != m || self.h.iter().any(|row| row.len() != dx) {
            return Err(FilterError::Dimension(format!(
                "sensor needs H of shape {m}×{dx} and offset of length {m}"
            )));
        }
        if self.r.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(FilterError::Config("sensor noise variances must be positive".into()));
        }
        Ok(())
    }

    /// Re-express a sensor on raw states in normalized state units:
    /// `H_n = H S_x`, `b_n = b + H μ_x`.
    pub fn from_raw(h: Vec<Vec<f64>>, offset: Vec<f64>, r: Vec<f64>, x_stats: &DimStats) -> Self {
        let h_n = h
            .iter()
            .map(|row| row.iter().zip(&x_stats.std).map(|(a, s)| a * s).collect())
            .collect();
        let b_n = h
            .iter()
            .zip(&offset)
            .map(|(row, b)| b + row.iter().zip(&x_stats.mean).map(|(a, m)| a * m).sum::<f64>())
            .collect();
        GaussianSensorModel { h: h_n, offset: b_n, r }
    }

    pub fn h_matrix(&self) -> DMatrix<f64> {
        let m = self.h.len();
        let n = self.h.first().map_or(0, |r| r.len());
        DMatrix::from_fn(m, n, |i, j| self.h[i][j])
    }

    /// `H x + b`
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.h
            .iter()
            .zip(&self.offset)
            .map(|(row, b)| b + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    }

    /// Noisy reading of `x`.
    pub fn sample(&self, x: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        self.predict(x)
            .into_iter()
            .zip(&self.r)
            .map(|(m, r)| {
                let z: f64 = StandardNormal.sample(rng);
                m + r.sqrt() * z
            })
            .collect()
    }

    /// `n` draws of the sensed dimensions `dims` from the sensor posterior
    /// under a flat prior, `N((HᵀR⁻¹H)⁻¹HᵀR⁻¹(ŷ − b), (HᵀR⁻¹H)⁻¹)`, with `H`
    /// restricted to the columns `dims`. Returns `n × dims.len()` row-major.
    pub fn flat_prior_samples(&self, dims: &[usize], y_hat: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>, FilterError> {
        let m = self.r.len();
        let h = DMatrix::from_fn(m, dims.len(), |i, j| self.h[i][dims[j]]);
        let r_inv = DMatrix::from_diagonal(&DVector::from_iterator(m, self.r.iter().map(|v| 1.0 / v)));
        let info = h.transpose() * &r_inv * &h;
        let chol = info
            .cholesky()
            .ok_or_else(|| FilterError::Config("sensed dimensions are not identifiable from the sensor".into()))?;
        let cov = chol.inverse();
        let resid = DVector::from_iterator(m, y_hat.iter().zip(&self.offset).map(|(y, b)| y - b));
        let mean = &cov * h.transpose() * r_inv * resid;
        let l = cov
            .cholesky()
            .ok_or_else(|| FilterError::Config("sensor posterior covariance is singular".into()))?
            .l();
        let d = dims.len();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let z = DVector::from_iterator(d, (0..d).map(|_| -> f64 { StandardNormal.sample(rng) }));
            out.extend((&mean + &l * z).iter());
        }
        Ok(out)
    }

    /// Precomputes `(R + β²/α² H Hᵀ)⁻¹` for each level.
    pub fn levels(&self, schedule: &NoiseSchedule, levels: &[f64]) -> Result<SensorLevels, FilterError> {
        let h = self.h_matrix();
        let hht = &h * h.transpose();
        let r = DMatrix::from_diagonal(&DVector::from_column_slice(&self.r));
        let mut per_level = Vec::with_capacity(levels.len());
        for &s in levels {
            let (a, b) = schedule.alpha_beta(s)?;
            if a < ALPHA_MIN {
                per_level.push(None);
                continue;
            }
            let c = &r + &hht * (b * b / (a * a));
            let inv = c
                .cholesky()
                .ok_or_else(|| FilterError::Config("sensor covariance not positive definite".into()))?
                .inverse();
            per_level.push(Some((a, b, inv)));
        }
        Ok(SensorLevels { h, per_level })
    }
}

/// Per-level sensor precomputation; `None` where the term is skipped.
#[derive(Debug, Clone)]
pub struct SensorLevels {
    h: DMatrix<f64>,
    per_level: Vec<Option<(f64, f64, DMatrix<f64>)>>,
}

impl SensorLevels {
    pub fn active(&self, level: usize) -> bool {
        self.per_level[level].is_some()
    }
}

/// Adds `ε_ext = −β_s ∇ log N(ŷ; H x_s/α_s + b, R + β_s²/α_s² H Hᵀ)` to `out`.
/// Returns `false` (and leaves `out` alone) where the term is skipped.
pub fn external_sensor_noise_into(
    sensor: &GaussianSensorModel,
    pre: &SensorLevels,
    y_hat: &[f64],
    x_s: &[f64],
    level: usize,
    out: &mut [f64],
) -> bool {
    let Some((a, b, inv)) = &pre.per_level[level] else {
        return false;
    };
    let m = y_hat.len();
    let mut resid = vec![0.0; m];
    for i in 0..m {
        let hx: f64 = (0..x_s.len()).map(|j| pre.h[(i, j)] * x_s[j]).sum();
        resid[i] = y_hat[i] - (hx / a + sensor.offset[i]);
    }
    let mut w = vec![0.0; m];
    for i in 0..m {
        w[i] = (0..m).map(|k| inv[(i, k)] * resid[k]).sum();
    }
    // ∇ log N = (1/α) Hᵀ C⁻¹ (ŷ − H x_s/α − b)
    for j in 0..x_s.len() {
        let g: f64 = (0..m).map(|i| pre.h[(i, j)] * w[i]).sum::<f64>() / a;
        out[j] += -b * g;
    }
    true
}

/// Standalone form of [`external_sensor_noise_into`]; `None` below [`ALPHA_MIN`].
pub fn external_sensor_noise(
    sensor: &GaussianSensorModel,
    schedule: &NoiseSchedule,
    y_hat: &[f64],
    x_s: &[f64],
    s: f64,
) -> Result<Option<Vec<f64>>, FilterError> {
    sensor.validate(x_s.len())?;
    let pre = sensor.levels(schedule, &[s])?;
    let mut out = vec![0.0; x_s.len()];
    Ok(external_sensor_noise_into(sensor, &pre, y_hat, x_s, 0, &mut out).then_some(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level_for_alpha_bar(ab: f64) -> f64 {
        2.0 * ab.sqrt().asin() / std::f64::consts::PI
    }

    fn scalar() -> GaussianSensorModel {
        GaussianSensorModel {
            h: vec![vec![1.0]],
            offset: vec![0.0],
            r: vec![0.25],
        }
    }

    #[test]
    fn worked_example() {
        let sch = NoiseSchedule::new(50).unwrap();
        let s = level_for_alpha_bar(0.64);
        let e = external_sensor_noise(&scalar(), &sch, &[1.0], &[0.0], s).unwrap().unwrap();
        assert!((e[0] + 0.6 / 0.8 / 0.8125).abs() < 1e-12, "{}", e[0]);
        assert!((e[0] + 0.9231).abs() < 1e-4);
    }

    #[test]
    fn zero_residual_gives_zero() {
        let sch = NoiseSchedule::new(50).unwrap();
        let s = level_for_alpha_bar(0.5);
        let (a, _) = sch.alpha_beta(s).unwrap();
        let e = external_sensor_noise(&scalar(), &sch, &[0.7 / a], &[0.7], s).unwrap().unwrap();
        assert!(e[0].abs() < 1e-12);
    }

    #[test]
    fn matches_finite_difference_in_2d() {
        let sensor = GaussianSensorModel {
            h: vec![vec![0.5, -1.0, 0.0], vec![0.2, 0.3, 1.0]],
            offset: vec![0.1, -0.2],
            r: vec![0.3, 0.1],
        };
        let sch = NoiseSchedule::new(50).unwrap();
        let s = 0.63;
        let (a, b) = sch.alpha_beta(s).unwrap();
        let y = [0.4, -0.8];
        let x = [0.3, -0.1, 0.9];
        let logp = |x: &[f64]| {
            let h = sensor.h_matrix();
            let c = DMatrix::from_diagonal(&DVector::from_column_slice(&sensor.r)) + &h * h.transpose() * (b * b / (a * a));
            let m = &h * DVector::from_column_slice(x) / a + DVector::from_column_slice(&sensor.offset);
            let r = DVector::from_column_slice(&y) - m;
            -0.5 * (r.transpose() * c.try_inverse().unwrap() * r)[(0, 0)]
        };
        let e = external_sensor_noise(&sensor, &sch, &y, &x, s).unwrap().unwrap();
        for j in 0..3 {
            let h = 1e-6;
            let mut xp = x;
            xp[j] += h;
            let mut xm = x;
            xm[j] -= h;
            let fd = (logp(&xp) - logp(&xm)) / (2.0 * h);
            assert!((e[j] + b * fd).abs() < 1e-8, "dim {j}");
        }
    }

    #[test]
    fn skipped_near_pure_noise() {
        let sch = NoiseSchedule::new(50).unwrap();
        assert!(external_sensor_noise(&scalar(), &sch, &[1.0], &[0.0], 0.01).unwrap().is_none());
    }

    #[test]
    fn flat_prior_samples_invert_the_sensor() {
        use rand::SeedableRng;
        let sensor = GaussianSensorModel {
            h: vec![vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 0.5]],
            offset: vec![1.0, 0.0],
            r: vec![0.04, 0.01],
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let n = 20_000;
        let s = sensor.flat_prior_samples(&[1, 2], &[3.0, 0.25], n, &mut rng).unwrap();
        let mean: Vec<f64> = (0..2).map(|j| s.iter().skip(j).step_by(2).sum::<f64>() / n as f64).collect();
        assert!((mean[0] - 1.0).abs() < 0.01 && (mean[1] - 0.5).abs() < 0.01);
        let var0 = s.iter().step_by(2).map(|v| (v - 1.0).powi(2)).sum::<f64>() / n as f64;
        assert!((var0 - 0.01).abs() < 0.001);
        assert!(sensor.flat_prior_samples(&[0], &[3.0, 0.25], 1, &mut rng).is_err());
    }

    #[test]
    fn raw_to_normalized_sensor_agrees() {
        let stats = DimStats {
            mean: vec![1.0, -2.0],
            std: vec![2.0, 0.5],
        };
        let raw = GaussianSensorModel {
            h: vec![vec![1.0, 3.0]],
            offset: vec![0.5],
            r: vec![0.1],
        };
        let n = GaussianSensorModel::from_raw(raw.h.clone(), raw.offset.clone(), raw.r.clone(), &stats);
        let x_raw = [0.3, 0.7];
        let x_n = stats.normalize(&x_raw);
        assert!((raw.predict(&x_raw)[0] - n.predict(&x_n)[0]).abs() < 1e-12);
    }
}
