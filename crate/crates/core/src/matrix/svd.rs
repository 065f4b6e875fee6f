//! Exact SVD used as a test oracle.
//!
//! One-sided (Hestenes) Jacobi: each rotation is the cyclic Jacobi rotation
//! that annihilates an off-diagonal entry of the Gram matrix of the smaller
//! side, applied to the columns directly so the Gram matrix is never formed.
//! The training path does not call this.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{dot, gram_schmidt_columns, norm2, Matrix, GS_TOL};
use crate::error::{shape_err, Result};

/// Largest `min(rows, cols)` accepted by [`svd_oracle`].
pub const SVD_ORACLE_MAX_DIM: usize = 256;

const MAX_SWEEPS: usize = 100;
const ROTATION_TOL: f64 = 1e-15;

/// Thin SVD `m = u · diag(s) · vᵀ` with `k = min(rows, cols)` components.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    /// `u · diag(s) · vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (x, s) in us.row_mut(r).iter_mut().zip(&self.s) {
                *x *= s;
            }
        }
        us.matmul_t(&self.v).expect("consistent factors")
    }

    /// Leading `r` left and right singular vectors.
    pub fn top(&self, r: usize) -> (Matrix, Matrix) {
        (self.u.columns(0, r), self.v.columns(0, r))
    }
}

pub fn svd_oracle(m: &Matrix) -> Result<Svd> {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k > SVD_ORACLE_MAX_DIM {
        return Err(shape_err!("svd_oracle limited to min dimension {SVD_ORACLE_MAX_DIM}, got {k}"));
    }
    if k == 0 {
        return Err(shape_err!("svd_oracle on empty matrix"));
    }
    if rows >= cols {
        let (u, s, v) = one_sided_jacobi(m);
        Ok(Svd { u, s, v })
    } else {
        let (u, s, v) = one_sided_jacobi(&m.transpose());
        Ok(Svd { u: v, s, v: u })
    }
}

/// Requires `a.rows() >= a.cols()`.
fn one_sided_jacobi(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (n, k) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..k).map(|c| a.column(c)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let mut e = vec![0.0; k];
            e[c] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..k {
            for j in (i + 1)..k {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= ROTATION_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut vcols, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let smax = norms[order[0]];
    let cutoff = (n as f64) * f64::EPSILON * smax;

    let mut u = Matrix::zeros(n, k);
    let mut v = Matrix::zeros(k, k);
    let mut s = vec![0.0; k];
    let mut deficient = false;
    for (dst, &src) in order.iter().enumerate() {
        let nrm = norms[src];
        if nrm > cutoff && nrm > 0.0 {
            s[dst] = nrm;
            let col: Vec<f64> = cols[src].iter().map(|x| x / nrm).collect();
            u.set_column(dst, &col);
        } else {
            deficient = true;
        }
        v.set_column(dst, &vcols[src]);
    }
    if deficient {
        // zero columns of u are refilled with an orthonormal complement
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        u = gram_schmidt_columns(&u, GS_TOL, &mut rng).expect("n >= k");
    }
    (u, s, v)
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let (ci, cj) = (&mut left[i], &mut right[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, xj) = (*x, *y);
        *x = c * xi - s * xj;
        *y = s * xi + c * xj;
    }
}
