//! Diagonal Gaussian action distribution with a state-independent log-std.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{NnError, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Batch of diagonal Gaussians sharing one `log_std` vector.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl DiagGaussian {
    /// `mean` is row-major `[B, A]`, `log_std` is `[A]`.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if log_std.is_empty() || mean.len() % log_std.len() != 0 {
            return Err(crate::error::shape_err(
                "gaussian_head",
                &[mean.len()],
                &[log_std.len()],
            ));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("gaussian mean".into()));
        }
        if log_std.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("gaussian log_std".into()));
        }
        Ok(Self { mean, log_std })
    }

    pub fn dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn batch(&self) -> usize {
        self.mean.len() / self.dim()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let a = self.dim();
        self.mean
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.log_std[i % a].exp() * z
            })
            .collect()
    }

    /// Log density per batch row.
    pub fn log_prob(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(crate::error::shape_err("log_prob", &[self.mean.len()], &[x.len()]));
        }
        let a = self.dim();
        Ok(self
            .mean
            .chunks(a)
            .zip(x.chunks(a))
            .map(|(m, x)| {
                (0..a)
                    .map(|j| {
                        let z = (x[j] - m[j]) / self.log_std[j].exp();
                        -0.5 * z * z - self.log_std[j] - HALF_LN_2PI
                    })
                    .sum()
            })
            .collect())
    }

    /// `KL(self || other)` per batch row.
    pub fn kl(&self, other: &DiagGaussian) -> Result<Vec<f64>> {
        if self.mean.len() != other.mean.len() || self.dim() != other.dim() {
            return Err(crate::error::shape_err(
                "kl",
                &[self.mean.len()],
                &[other.mean.len()],
            ));
        }
        let a = self.dim();
        Ok(self
            .mean
            .chunks(a)
            .zip(other.mean.chunks(a))
            .map(|(p, q)| {
                (0..a)
                    .map(|j| {
                        let (lp, lq) = (self.log_std[j], other.log_std[j]);
                        let d = p[j] - q[j];
                        lq - lp + ((2.0 * lp).exp() + d * d) / (2.0 * (2.0 * lq).exp()) - 0.5
                    })
                    .sum()
            })
            .collect())
    }

    /// Entropy of one row (identical for every row).
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|l| 0.5 + HALF_LN_2PI + l).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn log_prob_at_mode() {
        let d = DiagGaussian::new(vec![0.3], vec![0.0]).unwrap();
        let lp = d.log_prob(&[0.3]).unwrap()[0];
        assert!((lp - (-0.918_938_533_204_672_8)).abs() < 1e-12);
        assert!((lp + 0.9189).abs() < 1e-4);
    }

    #[test]
    fn kl_cases() {
        let p = DiagGaussian::new(vec![0.0, 0.5], vec![0.0, -1.0]).unwrap();
        assert!(p.kl(&p).unwrap().iter().all(|v| v.abs() < 1e-15));
        let a = DiagGaussian::new(vec![0.0], vec![0.0]).unwrap();
        let b = DiagGaussian::new(vec![1.0], vec![0.0]).unwrap();
        assert!((a.kl(&b).unwrap()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn entropy_of_standard_normal() {
        let d = DiagGaussian::new(vec![0.0; 2], vec![0.0; 2]).unwrap();
        let want = 2.0 * 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln());
        assert!((d.entropy() - want).abs() < 1e-12);
    }

    #[test]
    fn non_finite_mean_rejected() {
        assert!(DiagGaussian::new(vec![f64::NAN], vec![0.0]).is_err());
    }

    #[test]
    fn sample_moments() {
        let d = DiagGaussian::new(vec![1.0], vec![(-1.0f64)]).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(9);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01);
        assert!((var.sqrt() - (-1.0f64).exp()).abs() < 0.01);
    }
}
