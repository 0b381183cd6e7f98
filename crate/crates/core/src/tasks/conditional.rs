use rand::RngCore;

use super::gauss;
use crate::diffusion::NoiseSchedule;

/// Static pairs `y ~ N(0, y_std²)`, `x | y ~ N(y, σ²)` with closed-form
/// conditional and marginal perturbed scores. Used to check denoiser training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianConditional {
    pub sigma: f64,
    pub y_std: f64,
}

impl Default for GaussianConditional {
    fn default() -> Self {
        GaussianConditional { sigma: 0.5, y_std: 1.0 }
    }
}

impl GaussianConditional {
    pub fn sample_pairs(&self, n: usize, rng: &mut dyn RngCore) -> (Vec<f64>, Vec<f64>) {
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let y = self.y_std * gauss(rng);
            xs.push(y + self.sigma * gauss(rng));
            ys.push(y);
        }
        (xs, ys)
    }

    pub fn marginal_var(&self) -> f64 {
        self.y_std * self.y_std + self.sigma * self.sigma
    }

    /// Optimal noise prediction `E[ε | x_s, y]`.
    pub fn conditional_noise(&self, x_s: f64, y: f64, alpha: f64, beta: f64) -> f64 {
        beta * (x_s - alpha * y) / (alpha * alpha * self.sigma * self.sigma + beta * beta)
    }

    /// Optimal unconditional noise prediction `E[ε | x_s]`.
    pub fn marginal_noise(&self, x_s: f64, alpha: f64, beta: f64) -> f64 {
        beta * x_s / (alpha * alpha * self.marginal_var() + beta * beta)
    }

    /// `∫₀¹ α²v/(α²v + β²) ds`: the per-dimension minimum of `E‖ε − ε̂‖²`
    /// for a Gaussian target of variance `v`, by composite Simpson quadrature.
    pub fn floor_for_variance(schedule: &NoiseSchedule, v: f64) -> f64 {
        if v <= 0.0 {
            return 0.0;
        }
        let n = 4000;
        let f = |s: f64| {
            let ab = schedule.alpha_bar(s);
            ab * v / (ab * v + (1.0 - ab))
        };
        let h = 1.0 / n as f64;
        let mut acc = f(0.0) + f(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(i as f64 * h);
        }
        acc * h / 3.0
    }

    /// Expected DSM loss of the optimal denoiser when conditioning is dropped
    /// with probability `p_drop`.
    pub fn dsm_floor(&self, schedule: &NoiseSchedule, p_drop: f64) -> f64 {
        (1.0 - p_drop) * Self::floor_for_variance(schedule, self.sigma * self.sigma)
            + p_drop * Self::floor_for_variance(schedule, self.marginal_var())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_limits() {
        let sch = NoiseSchedule::new(50).unwrap();
        assert!(GaussianConditional::floor_for_variance(&sch, 0.0).abs() < 1e-15);
        // v = 1: integrand is ᾱ = sin²(sπ/2), whose mean over [0, 1] is ½
        assert!((GaussianConditional::floor_for_variance(&sch, 1.0) - 0.5).abs() < 1e-10);
    }
}
