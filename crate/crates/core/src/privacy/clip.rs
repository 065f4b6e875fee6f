use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::norm2;

/// L2 bound applied to each sample's whole concatenated gradient vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    threshold: f64,
}

impl ClipConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        if threshold.is_nan() || threshold <= 0.0 {
            return Err(Error::Config(format!("clipping threshold must be positive, got {threshold}")));
        }
        Ok(Self { threshold })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

/// Scales every vector whose norm exceeds `C` down to norm `C` and returns
/// the pre-clip norms.
pub fn clip_in_place(vectors: &mut [Vec<f64>], clip: &ClipConfig) -> Vec<f64> {
    let c = clip.threshold;
    vectors
        .iter_mut()
        .map(|v| {
            let n = norm2(v);
            if n > c {
                let s = c / n;
                v.iter_mut().for_each(|x| *x *= s);
            }
            n
        })
        .collect()
}

/// Non-mutating form of [`clip_in_place`].
pub fn clip_per_sample(vectors: &[Vec<f64>], threshold: f64) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let clip = ClipConfig::new(threshold)?;
    let mut out = vectors.to_vec();
    let norms = clip_in_place(&mut out, &clip);
    Ok((out, norms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::dot;

    #[test]
    fn short_vector_unchanged() {
        let v = vec![vec![0.3, 0.4]];
        let (out, norms) = clip_per_sample(&v, 1.0).unwrap();
        assert_eq!(out, v);
        assert!((norms[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn long_vector_scaled_to_threshold() {
        let (out, _) = clip_per_sample(&[vec![1.2, 1.6]], 1.0).unwrap();
        assert!((norm2(&out[0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norms_bounded_and_directions_kept() {
        let vs: Vec<Vec<f64>> = (0..5).map(|i| (0..7).map(|j| ((i * 7 + j) as f64).sin() * (i + 1) as f64).collect()).collect();
        let (out, _) = clip_per_sample(&vs, 1.5).unwrap();
        for (a, b) in vs.iter().zip(&out) {
            assert!(norm2(b) <= 1.5 + 1e-12);
            let cos = dot(a, b) / (norm2(a) * norm2(b));
            assert!((cos - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nonpositive_threshold_rejected() {
        assert!(matches!(ClipConfig::new(0.0), Err(Error::Config(_))));
        assert!(matches!(ClipConfig::new(-1.0), Err(Error::Config(_))));
    }
}
