use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    multiplier: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(multiplier: f64, seed: u64) -> Result<Self> {
        if multiplier.is_nan() || multiplier <= 0.0 {
            return Err(Error::Config(format!("noise multiplier must be positive, got {multiplier}")));
        }
        Ok(Self { multiplier, seed })
    }

    pub fn multiplier(&self) -> f64 {
        self.multiplier
    }
}

/// Adds i.i.d. `N(0, σ²C²)` to every coordinate of `aggregate`. The draw is a
/// pure function of `(seed, step, layer)`.
pub fn gaussian_perturb(aggregate: &mut [f64], noise: &NoiseConfig, clip: f64, step: u64, layer: u64) {
    let std = noise.multiplier * clip;
    let mut rng = keyed_rng(noise.seed, step, layer, Stream::Noise);
    for v in aggregate.iter_mut() {
        *v += std * rng.sample::<f64, _>(StandardNormal);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanishing_noise() {
        let base = vec![1.0, -2.0, 3.0];
        let mut v = base.clone();
        gaussian_perturb(&mut v, &NoiseConfig::new(1e-12, 3).unwrap(), 1.0, 0, 0);
        for (a, b) in v.iter().zip(&base) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn empirical_variance() {
        let mut v = vec![0.0; 1_000_000];
        gaussian_perturb(&mut v, &NoiseConfig::new(1.0, 11).unwrap(), 2.0, 5, 1);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        assert!((var - 4.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn fixed_key_is_bit_exact() {
        let cfg = NoiseConfig::new(0.7, 99).unwrap();
        let mut a = vec![0.0; 64];
        let mut b = vec![0.0; 64];
        gaussian_perturb(&mut a, &cfg, 1.0, 3, 2);
        gaussian_perturb(&mut b, &cfg, 1.0, 3, 2);
        assert_eq!(a, b);
        let mut c = vec![0.0; 64];
        gaussian_perturb(&mut c, &cfg, 1.0, 3, 1);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_nonpositive_multiplier() {
        assert!(NoiseConfig::new(0.0, 0).is_err());
    }
}
