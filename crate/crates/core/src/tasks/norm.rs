use serde::{Deserialize, Serialize};

/// Per-dimension mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Dimensions with a spread below this are left unscaled.
const MIN_STD: f64 = 1e-9;

impl DimStats {
    pub fn identity(dim: usize) -> Self {
        DimStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Two-pass population statistics; empty input gives the identity.
    pub fn from_samples<'a, I>(dim: usize, samples: I) -> Self
    where
        I: Iterator<Item = &'a [f64]> + Clone,
    {
        let mut mean = vec![0.0; dim];
        let mut n = 0usize;
        for v in samples.clone() {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
            n += 1;
        }
        if n == 0 {
            return Self::identity(dim);
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; dim];
        for v in samples {
            for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > MIN_STD {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        DimStats { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn denormalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| x * s + m)
            .collect()
    }

    pub fn is_valid(&self) -> bool {
        self.mean.len() == self.std.len()
            && self.mean.iter().all(|m| m.is_finite())
            && self.std.iter().all(|s| s.is_finite() && *s > 0.0)
    }
}

/// Normalization of states, observations and controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub x: DimStats,
    pub y: DimStats,
    pub u: DimStats,
}

impl NormStats {
    pub fn identity(dx: usize, dy: usize, du: usize) -> Self {
        NormStats {
            x: DimStats::identity(dx),
            y: DimStats::identity(dy),
            u: DimStats::identity(du),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_valid() && self.y.is_valid() && self.u.is_valid()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_maps_to_zero() {
        let s = DimStats {
            mean: vec![1.0, -2.0],
            std: vec![0.5, 3.0],
        };
        assert_eq!(s.normalize(&[1.0, -2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn constant_dimension_keeps_unit_scale() {
        let rows = [vec![2.0, 1.0], vec![2.0, 3.0]];
        let s = DimStats::from_samples(2, rows.iter().map(|r| r.as_slice()));
        assert_eq!(s.mean, vec![2.0, 2.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert!(s.is_valid());
    }

    proptest! {
        #[test]
        fn round_trip(v in prop::collection::vec(-1e3f64..1e3, 3),
                      m in prop::collection::vec(-10f64..10.0, 3),
                      sd in prop::collection::vec(1e-3f64..10.0, 3)) {
            let s = DimStats { mean: m, std: sd };
            let back = s.denormalize(&s.normalize(&v));
            for (a, b) in back.iter().zip(&v) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
