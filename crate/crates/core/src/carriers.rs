//! Gradient-carrier generation.
//!
//! Carriers come from a few power iterations on the historical update
//! `Δ_t = W_t − W₀·1{t > T_warmup}`; during warm-up the current weight itself
//! is decomposed. Every step regenerates carriers, and every output has
//! exactly `r` orthonormal columns in `L` and `r` orthonormal rows in `R`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{gram_schmidt_columns, gram_schmidt_rows, svd_oracle, Matrix, GS_TOL};
use crate::net::Carriers;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CarrierConfig {
    pub rank: usize,
    pub power_iters: usize,
    pub seed: u64,
}

impl CarrierConfig {
    pub fn new(rank: usize, power_iters: usize, seed: u64) -> Self {
        Self { rank, power_iters, seed }
    }

    fn validate(&self, p: usize, d: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("carrier rank must be positive".into()));
        }
        if self.rank > p.min(d) {
            return Err(Error::Config(format!("rank {} exceeds min({p}, {d})", self.rank)));
        }
        if self.power_iters == 0 {
            return Err(Error::Config("at least one power iteration is required".into()));
        }
        Ok(())
    }
}

/// Initial weights of every layer plus the warm-up schedule.
#[derive(Debug, Clone)]
pub struct HistoryState {
    pub initial: Vec<Matrix>,
    pub warmup_steps: usize,
}

impl HistoryState {
    pub fn new(initial: Vec<Matrix>, warmup_steps: usize) -> Self {
        Self { initial, warmup_steps }
    }

    pub fn in_warmup(&self, step: usize) -> bool {
        step <= self.warmup_steps
    }

    /// `Δ_t` for `layer` given its current weight, with `step` counted from 1.
    pub fn delta(&self, layer: usize, step: usize, current: &Matrix) -> Result<Matrix> {
        if self.in_warmup(step) {
            Ok(current.clone())
        } else {
            current.sub(&self.initial[layer])
        }
    }
}

/// Power-method decomposition: `R` starts standard Gaussian; `K` times
/// `L ← ΔRᵀ`, orthonormalize the columns of `L`, `R ← LᵀΔ`; finally
/// orthonormalize the rows of `R`.
pub fn power_decompose(delta: &Matrix, cfg: &CarrierConfig) -> Result<Carriers> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    power_decompose_with(delta, cfg.rank, cfg.power_iters, &mut rng)
}

pub fn power_decompose_with<R: Rng + ?Sized>(
    delta: &Matrix,
    rank: usize,
    iters: usize,
    rng: &mut R,
) -> Result<Carriers> {
    let (p, d) = delta.shape();
    CarrierConfig::new(rank, iters, 0).validate(p, d)?;
    let mut right = Matrix::gaussian(rank, d, rng);
    let mut left = Matrix::zeros(p, rank);
    for _ in 0..iters {
        left = gram_schmidt_columns(&delta.matmul_t(&right)?, GS_TOL, rng)?;
        right = left.t_matmul(delta)?;
    }
    let right = gram_schmidt_rows(&right, GS_TOL, rng)?;
    Ok(Carriers { left, right })
}

/// Orthonormalized Gaussian carriers, independent of any history.
pub fn random_carriers(p: usize, d: usize, cfg: &CarrierConfig) -> Result<Carriers> {
    cfg.validate(p, d)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let left = gram_schmidt_columns(&Matrix::gaussian(p, cfg.rank, &mut rng), GS_TOL, &mut rng)?;
    let right = gram_schmidt_rows(&Matrix::gaussian(cfg.rank, d, &mut rng), GS_TOL, &mut rng)?;
    Ok(Carriers { left, right })
}

/// `(I − LLᵀ) M (I − RᵀR)`.
pub fn project_out(m: &Matrix, carriers: &Carriers) -> Result<Matrix> {
    let (l, r) = (&carriers.left, &carriers.right);
    let a = m.sub(&l.matmul(&l.t_matmul(m)?)?)?;
    a.sub(&a.matmul_t(r)?.matmul(r)?)
}

/// `‖(I − LLᵀ) G (I − RᵀR)‖_F / ‖G‖_F`.
pub fn projection_residual(grad: &Matrix, carriers: &Carriers) -> Result<f64> {
    let norm = grad.frobenius_norm();
    if norm == 0.0 {
        return Err(Error::Undefined("projection residual of a zero gradient".into()));
    }
    Ok(project_out(grad, carriers)?.frobenius_norm() / norm)
}

/// The gradient's own top-`r` singular subspaces as carriers (`R = Vᵣᵀ`).
pub fn svd_carriers(grad: &Matrix, rank: usize) -> Result<Carriers> {
    let svd = svd_oracle(grad)?;
    let (u, v) = svd.top(rank);
    Ok(Carriers { left: u, right: v.transpose() })
}

/// Historical and self projection residuals of `grad`.
pub fn projection_residuals(grad: &Matrix, historical: &Carriers, own: &Carriers) -> Result<(f64, f64)> {
    Ok((projection_residual(grad, historical)?, projection_residual(grad, own)?))
}
