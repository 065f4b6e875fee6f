//! Spectral quantities computed without a full decomposition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{norm2, svd_oracle, Matrix};
use crate::error::{Error, Result};

/// Power iterations used by [`stable_rank`].
pub const STABLE_RANK_ITERS: usize = 100;

const START_SEED: u64 = 0x57ab1e;

/// Estimates `‖m‖₂` with `iters` power iterations on `mᵀm`.
///
/// The start vector is drawn from a fixed seed, so the estimate is a
/// deterministic function of `m` and `iters`. The returned value is the
/// Rayleigh-quotient estimate, a lower bound on the true norm.
pub fn spectral_norm(m: &Matrix, iters: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let mut v = Matrix::gaussian(m.cols(), 1, &mut rng).into_vec();
    let n0 = norm2(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut est = 0.0;
    for _ in 0..iters.max(1) {
        let mv = m.matvec(&v).expect("shape");
        est = norm2(&mv);
        let w = m.t_matvec(&mv).expect("shape");
        let nw = norm2(&w);
        if nw == 0.0 {
            break;
        }
        v = w.into_iter().map(|x| x / nw).collect();
    }
    let mv = m.matvec(&v).expect("shape");
    est.max(norm2(&mv))
}

/// `‖m‖_F² / ‖m‖₂²`.
pub fn stable_rank(m: &Matrix) -> Result<f64> {
    let fro = m.frobenius_norm_sq();
    if fro == 0.0 {
        return Err(Error::Undefined("stable rank of a zero matrix".into()));
    }
    let spec = spectral_norm(m, STABLE_RANK_ITERS);
    Ok(fro / (spec * spec))
}

/// Sine of the largest principal angle between the column spaces of two
/// matrices with orthonormal columns: `‖(I − AAᵀ)B‖₂`.
pub fn principal_angle_sin(a: &Matrix, b: &Matrix) -> Result<f64> {
    let proj = a.matmul(&a.t_matmul(b)?)?;
    let resid = b.sub(&proj)?;
    if resid.max_abs() == 0.0 {
        return Ok(0.0);
    }
    Ok(svd_oracle(&resid)?.s[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_stable_rank() {
        for n in [1, 3, 8] {
            assert!((stable_rank(&Matrix::identity(n)).unwrap() - n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_stable_rank() {
        let m = Matrix::outer(&[1.0, -2.0, 0.5], &[3.0, 1.0]);
        assert!((stable_rank(&m).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn diag_stable_rank() {
        assert!((stable_rank(&Matrix::diag(&[2.0, 1.0])).unwrap() - 1.25).abs() < 1e-12);
    }

    #[test]
    fn zero_is_undefined() {
        assert!(matches!(stable_rank(&Matrix::zeros(2, 2)), Err(Error::Undefined(_))));
    }

    #[test]
    fn angle_between_axes() {
        let e1 = Matrix::column_vector(&[1.0, 0.0]);
        let e2 = Matrix::column_vector(&[0.0, 1.0]);
        assert!((principal_angle_sin(&e1, &e2).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(principal_angle_sin(&e1, &e1).unwrap(), 0.0);
    }
}
