//! Modified Gram–Schmidt with re-orthogonalization and deficiency fill.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{dot, norm2, Matrix};
use crate::error::{shape_err, Result};

/// Relative deficiency tolerance: a column is deficient when its residual
/// after projection is at most `GS_TOL * ‖original column‖`.
pub const GS_TOL: f64 = 1e-10;

const FILL_ATTEMPTS: usize = 64;

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    // two sweeps of modified Gram-Schmidt
    for _ in 0..2 {
        for q in basis {
            let c = dot(q, v);
            for (x, y) in v.iter_mut().zip(q) {
                *x -= c * y;
            }
        }
    }
}

fn random_complement<R: Rng + ?Sized>(n: usize, basis: &[Vec<f64>], rng: &mut R) -> Vec<f64> {
    for _ in 0..FILL_ATTEMPTS {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let before = norm2(&v);
        project_out(&mut v, basis);
        let nrm = norm2(&v);
        if nrm > 1e-6 * before {
            v.iter_mut().for_each(|x| *x /= nrm);
            return v;
        }
    }
    unreachable!("a Gaussian vector failed to leave a proper subspace {FILL_ATTEMPTS} times")
}

/// Orthonormalizes the columns of `m`.
///
/// Columns whose residual falls to `tol` times their original norm (including
/// zero columns) are replaced by random unit vectors orthogonal to every column
/// accepted so far, so the output always has `m.cols()` orthonormal columns.
pub fn gram_schmidt_columns<R: Rng + ?Sized>(m: &Matrix, tol: f64, rng: &mut R) -> Result<Matrix> {
    let (n, k) = m.shape();
    if k == 0 {
        return Err(shape_err!("gram_schmidt_columns needs at least one column"));
    }
    if n < k {
        return Err(shape_err!("cannot orthonormalize {k} columns in dimension {n}"));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for c in 0..k {
        let mut v = m.column(c);
        let original = norm2(&v);
        project_out(&mut v, &basis);
        let nrm = norm2(&v);
        if nrm <= tol * original || nrm == 0.0 {
            basis.push(random_complement(n, &basis, rng));
        } else {
            v.iter_mut().for_each(|x| *x /= nrm);
            basis.push(v);
        }
    }
    let mut out = Matrix::zeros(n, k);
    for (c, v) in basis.iter().enumerate() {
        out.set_column(c, v);
    }
    Ok(out)
}

/// Orthonormalizes the rows of `m` (columns of its transpose).
pub fn gram_schmidt_rows<R: Rng + ?Sized>(m: &Matrix, tol: f64, rng: &mut R) -> Result<Matrix> {
    Ok(gram_schmidt_columns(&m.transpose(), tol, rng)?.transpose())
}

/// `‖QᵀQ − I‖_∞`, the largest entry-wise deviation from orthonormal columns.
pub fn orthonormality_error(q: &Matrix) -> f64 {
    let gram = q.t_matmul(q).expect("square gram");
    let mut worst = 0.0_f64;
    for i in 0..gram.rows() {
        for j in 0..gram.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}
