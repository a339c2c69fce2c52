use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Factorized Gaussian parameterized by mean and log-variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::dim("DiagGaussian::new", mean.len(), log_var.len()));
        }
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian parameter".into()));
        }
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| l.exp()).collect()
    }
}

pub fn gaussian_log_prob(y: &[f64], q: &DiagGaussian) -> Result<f64> {
    if y.len() != q.dim() {
        return Err(Error::dim("gaussian_log_prob", y.len(), q.dim()));
    }
    Ok(y.iter()
        .zip(&q.mean)
        .zip(&q.log_var)
        .map(|((y, m), lv)| -0.5 * LN_2PI - 0.5 * lv - 0.5 * (y - m) * (y - m) * (-lv).exp())
        .sum())
}

/// `KL(q ‖ p)` for diagonal Gaussians.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::dim("kl_diag", q.dim(), p.dim()));
    }
    Ok((0..q.dim())
        .map(|i| {
            let (mq, lq, mp, lp) = (q.mean[i], q.log_var[i], p.mean[i], p.log_var[i]);
            0.5 * ((lq - lp).exp() + (mq - mp) * (mq - mp) * (-lp).exp() - 1.0 + lp - lq)
        })
        .sum())
}

/// `mean + exp(log_var / 2) ⊙ noise`.
pub fn reparam_sample(q: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != q.dim() {
        return Err(Error::dim("reparam_sample", q.dim(), noise.len()));
    }
    Ok(q.mean
        .iter()
        .zip(&q.log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn log_prob_closed_forms() {
        let q = DiagGaussian::standard(1);
        assert!((gaussian_log_prob(&[0.0], &q).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((gaussian_log_prob(&[1.0], &q).unwrap() + 1.418_938_533_204_672_7).abs() < 1e-12);
        assert!(gaussian_log_prob(&[1.0, 2.0], &q).is_err());
    }

    #[test]
    fn log_prob_matches_quadrature_of_density() {
        // The exponentiated density must integrate to one and its log must
        // agree with a direct evaluation of the Gaussian pdf.
        let q = DiagGaussian::new(vec![0.37], vec![-0.8]).unwrap();
        let sd = (0.5f64 * -0.8).exp();
        let pdf = |y: f64| (-(y - 0.37) * (y - 0.37) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
        let (lo, hi, n) = (0.37 - 12.0 * sd, 0.37 + 12.0 * sd, 20_000);
        let h = (hi - lo) / n as f64;
        // Simpson's rule
        let mut acc = pdf(lo) + pdf(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * (gaussian_log_prob(&[lo + i as f64 * h], &q).unwrap()).exp();
        }
        assert!((acc * h / 3.0 - 1.0).abs() < 1e-6);
        for y in [-1.0, 0.2, 0.37, 1.5] {
            assert!((gaussian_log_prob(&[y], &q).unwrap() - pdf(y).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_closed_forms() {
        let q = DiagGaussian::standard(1);
        assert_eq!(kl_diag(&q, &q).unwrap(), 0.0);
        let p = DiagGaussian::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kl_diag(&q, &p).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let q = DiagGaussian::new(vec![0.3, -0.5], vec![-0.4, 0.2]).unwrap();
        let p = DiagGaussian::new(vec![-0.1, 0.4], vec![0.1, -0.3]).unwrap();
        let mut rng = RngStream::new(11);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z = reparam_sample(&q, &rng.normal_vec(2)).unwrap();
            acc += gaussian_log_prob(&z, &q).unwrap() - gaussian_log_prob(&z, &p).unwrap();
        }
        assert!((acc / n as f64 - kl_diag(&q, &p).unwrap()).abs() < 1e-2);
    }

    #[test]
    fn reparam_cases() {
        let q = DiagGaussian::new(vec![1.0, -2.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(reparam_sample(&q, &[0.0, 0.0]).unwrap(), q.mean);
        assert_eq!(reparam_sample(&q, &[0.5, -1.0]).unwrap(), vec![1.5, -3.0]);
    }

    #[test]
    fn reparam_sampling_moments() {
        let q = DiagGaussian::new(vec![0.7], vec![-1.2]).unwrap();
        let var = (-1.2f64).exp();
        let mut rng = RngStream::new(5);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| reparam_sample(&q, &[rng.standard_normal()]).unwrap()[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = (var / n as f64).sqrt();
        let se_var = var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - 0.7).abs() < 3.0 * se_mean);
        assert!((v - var).abs() < 3.0 * se_var);
    }
}
