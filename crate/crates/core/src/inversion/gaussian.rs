//! Continuous reference: inverting a Gaussian autoregressive model.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{standard_normal, Purpose, RngKey};

/// `eps_t = (x_t - mu_t) / sigma_t`, where `(mu_t, sigma_t) = model(&x[..t])`.
///
/// Every step only reads the observed history, so all steps run in parallel.
pub fn gaussian_ar_invert<F>(x: &[f64], model: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> (f64, f64) + Sync,
{
    (0..x.len())
        .into_par_iter()
        .map(|t| {
            let (mu, sigma) = model(&x[..t]);
            if !(sigma > 0.0) {
                return Err(Error::input(format!("sigma at step {t} must be positive, got {sigma}")));
            }
            Ok((x[t] - mu) / sigma)
        })
        .collect()
}

/// Forward pass `x_t = mu_t + sigma_t * eps_t`; inherently sequential.
pub fn gaussian_ar_generate<F>(eps: &[f64], model: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> (f64, f64),
{
    let mut x = Vec::with_capacity(eps.len());
    for (t, &e) in eps.iter().enumerate() {
        let (mu, sigma) = model(&x);
        if !(sigma > 0.0) {
            return Err(Error::input(format!("sigma at step {t} must be positive, got {sigma}")));
        }
        x.push(mu + sigma * e);
    }
    Ok(x)
}

/// Stable AR(2) mean with a history-dependent scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyGaussianAr {
    pub a1: f64,
    pub a2: f64,
    pub sigma0: f64,
    pub sigma1: f64,
}

impl Default for ToyGaussianAr {
    fn default() -> Self {
        ToyGaussianAr {
            a1: 0.6,
            a2: -0.2,
            sigma0: 0.5,
            sigma1: 0.25,
        }
    }
}

impl ToyGaussianAr {
    pub fn mu_sigma(&self, history: &[f64]) -> (f64, f64) {
        let at = |back: usize| history.len().checked_sub(back).map_or(0.0, |i| history[i]);
        let (x1, x2) = (at(1), at(2));
        (self.a1 * x1 + self.a2 * x2, self.sigma0 + self.sigma1 * x1.abs())
    }

    /// Samples `len` steps driven by seeded standard normals; returns `(x, eps)`.
    pub fn sample(&self, len: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        let eps: Vec<f64> = (0..len as u64)
            .map(|t| standard_normal(RngKey::new(seed, Purpose::AUX).nth(t)))
            .collect();
        let x = gaussian_ar_generate(&eps, |h| self.mu_sigma(h))?;
        Ok((x, eps))
    }
}
