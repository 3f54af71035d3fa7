//! Gaussian latent sampling and the negative-ELBO objective.
//!
//! The posterior is diagonal Gaussian, the prior standard normal and the
//! observation model a unit-variance Gaussian, so
//!
//! ```text
//! kl  = ½ Σ (μ² + exp(logvar) − 1 − logvar)
//! nll = ½ Σ ((x − x̂)² + ln 2π)
//! ```
//!
//! and the minimised loss is `kl + nll`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDist {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentDist {
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mu.len() != logvar.len() {
            return Err(Error::ShapeMismatch(format!(
                "mu has {} entries, logvar {}",
                mu.len(),
                logvar.len()
            )));
        }
        Ok(Self { mu, logvar })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `z = μ + exp(logvar / 2) ⊙ noise`.
pub fn reparameterize(dist: &LatentDist, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != dist.dim() || dist.logvar.len() != dist.dim() {
        return Err(Error::ShapeMismatch(format!(
            "noise of length {} for latent dimension {}",
            noise.len(),
            dist.dim()
        )));
    }
    Ok(dist
        .mu
        .iter()
        .zip(&dist.logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Elbo {
    /// Negative ELBO, `kl + nll`.
    pub total: f64,
    pub kl: f64,
    pub nll: f64,
}

pub fn kl_divergence(dist: &LatentDist) -> f64 {
    0.5 * dist
        .mu
        .iter()
        .zip(&dist.logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Gradient of [`kl_divergence`] with respect to (μ, logvar).
pub fn kl_gradient(dist: &LatentDist) -> (Vec<f64>, Vec<f64>) {
    let dmu = dist.mu.clone();
    let dlv = dist.logvar.iter().map(|lv| 0.5 * (lv.exp() - 1.0)).collect();
    (dmu, dlv)
}

pub fn gaussian_nll(x: &[f64], recon: &[f64]) -> f64 {
    let ln2pi = (2.0 * PI).ln();
    0.5 * x
        .iter()
        .zip(recon)
        .map(|(a, b)| (a - b) * (a - b) + ln2pi)
        .sum::<f64>()
}

/// Gradient of [`gaussian_nll`] with respect to the reconstruction.
pub fn gaussian_nll_gradient(x: &[f64], recon: &[f64]) -> Vec<f64> {
    recon.iter().zip(x).map(|(r, a)| r - a).collect()
}

pub fn elbo_loss(x: &[f64], recon: &[f64], dist: &LatentDist) -> Result<Elbo> {
    if x.len() != recon.len() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} values, reconstruction {}",
            x.len(),
            recon.len()
        )));
    }
    if dist.mu.len() != dist.logvar.len() {
        return Err(Error::ShapeMismatch("latent mu/logvar lengths differ".into()));
    }
    let kl = kl_divergence(dist);
    let nll = gaussian_nll(x, recon);
    Ok(Elbo {
        total: kl + nll,
        kl,
        nll,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{collection::vec, prop_assert, proptest};

    #[test]
    fn reparameterize_examples() {
        let d = LatentDist::new(vec![0.3, -1.0], vec![0.2, 0.5]).unwrap();
        assert_eq!(reparameterize(&d, &[0.0, 0.0]).unwrap(), d.mu);
        let collapsed = LatentDist::new(vec![2.0], vec![-80.0]).unwrap();
        assert!((reparameterize(&collapsed, &[3.0]).unwrap()[0] - 2.0).abs() < 1e-16);
        let unit = LatentDist::new(vec![0.0], vec![0.0]).unwrap();
        assert_eq!(reparameterize(&unit, &[1.5]).unwrap(), vec![1.5]);
        assert!(reparameterize(&unit, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn elbo_examples() {
        let prior = LatentDist::new(vec![0.0; 3], vec![0.0; 3]).unwrap();
        assert_eq!(kl_divergence(&prior), 0.0);
        let shifted = LatentDist::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kl_divergence(&shifted) - 0.5).abs() < 1e-12);

        let x = [0.1, -2.0, 3.5, 0.0];
        let e = elbo_loss(&x, &x, &prior).unwrap();
        let floor = x.len() as f64 * 0.5 * (2.0 * PI).ln();
        assert!((e.nll - floor).abs() < 1e-12);
        assert_eq!(e.total, e.kl + e.nll);
        assert!(elbo_loss(&x, &x[..3], &prior).is_err());
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_zero_only_at_prior(
            mu in vec(-5.0f64..5.0, 1..6),
            lv in vec(-5.0f64..5.0, 1..6),
        ) {
            let n = mu.len().min(lv.len());
            let d = LatentDist::new(mu[..n].to_vec(), lv[..n].to_vec()).unwrap();
            let kl = kl_divergence(&d);
            prop_assert!(kl >= 0.0);
            let at_prior = d.mu.iter().chain(&d.logvar).all(|v| *v == 0.0);
            prop_assert!(at_prior || kl > 0.0);
        }
    }
}
