//! Diagnostics: least-squares gradient subspaces, stable-rank tracking,
//! projection residuals and the loss-threshold membership-inference attack.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::carriers::{projection_residuals, svd_carriers};
use crate::error::{Error, Result};
use crate::matrix::{spectral_norm, stable_rank, svd_oracle, Matrix};
use crate::net::{loss_and_grad, Carriers, Network, Reduction};
use crate::optimizer::Batch;
use crate::rng::{keyed_rng, Stream};

/// `min_W (1/n) Σ ‖yᵢ − W xᵢ‖²`, features and targets stored as rows.
#[derive(Debug, Clone)]
pub struct LeastSquaresProblem {
    pub x: Matrix,
    pub y: Matrix,
    pub w: Matrix,
    pub eta: f64,
}

impl LeastSquaresProblem {
    pub fn new(x: Matrix, y: Matrix, w: Matrix, eta: f64) -> Result<Self> {
        if x.rows() != y.rows() || w.shape() != (y.cols(), x.cols()) || x.rows() == 0 {
            return Err(Error::Shape(format!("x {:?}, y {:?}, w {:?}", x.shape(), y.shape(), w.shape())));
        }
        if !(eta >= 0.0) {
            return Err(Error::Config(format!("step size {eta}")));
        }
        Ok(Self { x, y, w, eta })
    }

    /// A random instance whose features span an `r`-dimensional subspace of
    /// `R^d`, so the gradient's row space is `r`-dimensional and invariant under
    /// the curvature. The step size is `c / λ_max(H)` with `c` drawn from
    /// `[0.01, 0.05]`.
    pub fn random_low_rank(seed: u64, n: usize, d: usize, p: usize, r: usize) -> Result<Self> {
        if r == 0 || r > d || r > p || r > n {
            return Err(Error::Config(format!("rank {r} for n={n}, d={d}, p={p}")));
        }
        let mut rng = keyed_rng(seed, 0, 0, Stream::Misc);
        let basis = crate::matrix::gram_schmidt_columns(&Matrix::gaussian(d, r, &mut rng), crate::matrix::GS_TOL, &mut rng)?;
        let x = Matrix::gaussian(n, r, &mut rng).matmul_t(&basis)?;
        let y = Matrix::gaussian(n, p, &mut rng);
        let w = Matrix::gaussian(p, d, &mut rng);
        let mut problem = Self::new(x, y, w, 0.0)?;
        let c = 0.01 + 0.04 * rand::Rng::random::<f64>(&mut rng);
        problem.eta = c / spectral_norm(&problem.curvature()?, 500);
        Ok(problem)
    }

    pub fn samples(&self) -> usize {
        self.x.rows()
    }

    /// `(2/n) Σ (W xᵢ − yᵢ) xᵢᵀ`.
    pub fn gradient(&self, w: &Matrix) -> Result<Matrix> {
        let resid = self.x.matmul_t(w)?.sub(&self.y)?;
        Ok(resid.t_matmul(&self.x)?.scale(2.0 / self.samples() as f64))
    }

    /// `H = (2/n) Σ xᵢxᵢᵀ`, so one gradient step maps `∂W` to `∂W (I − ηH)`.
    pub fn curvature(&self) -> Result<Matrix> {
        Ok(self.x.t_matmul(&self.x)?.scale(2.0 / self.samples() as f64))
    }
}

/// Per-step output of [`ls_gradient_subspace_check`]; index `t` is the
/// gradient after `t` descent steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceTrace {
    pub rank: usize,
    pub grad_norm: Vec<f64>,
    /// `‖(I − U₀U₀ᵀ) ∂W_t‖_F`
    pub range_residual: Vec<f64>,
    /// `‖∂W_t (I − V₀V₀ᵀ)‖_F`
    pub null_residual: Vec<f64>,
    /// `‖∂W_t − ∂W₀ (I − ηH)^t‖_F / ‖∂W_t‖_F`
    pub closed_form_error: Vec<f64>,
}

/// Runs `steps` full-batch gradient-descent steps and measures how far each
/// gradient leaves the range and row space of the first gradient's SVD
/// (numerical rank, relative cutoff 1e-9).
pub fn ls_gradient_subspace_check(problem: &LeastSquaresProblem, steps: usize) -> Result<SubspaceTrace> {
    let g0 = problem.gradient(&problem.w)?;
    let svd = svd_oracle(&g0)?;
    let cutoff = 1e-9 * svd.s.first().copied().unwrap_or(0.0);
    let rank = svd.s.iter().filter(|&&s| s > cutoff).count();
    let (u, v) = svd.top(rank);
    let d = problem.w.cols();
    let step_map = Matrix::identity(d).sub(&problem.curvature()?.scale(problem.eta))?;

    let mut trace = SubspaceTrace {
        rank,
        grad_norm: Vec::new(),
        range_residual: Vec::new(),
        null_residual: Vec::new(),
        closed_form_error: Vec::new(),
    };
    let mut w = problem.w.clone();
    let mut power = Matrix::identity(d);
    for t in 0..=steps {
        let g = problem.gradient(&w)?;
        let norm = g.frobenius_norm();
        trace.grad_norm.push(norm);
        trace.range_residual.push(g.sub(&u.matmul(&u.t_matmul(&g)?)?)?.frobenius_norm());
        trace.null_residual.push(g.sub(&g.matmul(&v)?.matmul_t(&v)?)?.frobenius_norm());
        let closed = g0.matmul(&power)?;
        let gap = g.sub(&closed)?.frobenius_norm();
        trace.closed_form_error.push(if norm > 0.0 { gap / norm } else { gap });
        if t < steps {
            w.axpy(-problem.eta, &g)?;
            power = power.matmul(&step_map)?;
        }
    }
    Ok(trace)
}

/// Stable rank of each weight layer's dense batch gradient (mean loss).
/// Layers with an exactly zero gradient report `None`.
pub fn track_stable_rank(net: &Network, batch: &Batch) -> Result<Vec<Option<f64>>> {
    let (logits, mut acts) = net.forward(&batch.x)?;
    let (_, dlogits) = loss_and_grad(&logits, &batch.labels, Reduction::Mean)?;
    net.backward(&mut acts, &dlogits)?;
    Ok(net
        .aggregate_grads(&acts)?
        .iter()
        .map(|(g, _)| stable_rank(g).ok())
        .collect())
}

/// Historical and self projection residuals of `grad`; the self carriers are
/// the gradient's own top singular subspaces at the historical rank.
pub fn residual_pair(grad: &Matrix, historical: &Carriers) -> Result<(f64, f64)> {
    let own = svd_carriers(grad, historical.rank())?;
    projection_residuals(grad, historical, &own)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiOutcome {
    /// Balanced accuracy of the fixed threshold on the evaluation halves.
    pub success_rate: f64,
    pub threshold: f64,
    /// Balanced accuracy reached on the selection halves.
    pub selection_rate: f64,
}

fn balanced_accuracy(members: &[f64], nonmembers: &[f64], tau: f64) -> f64 {
    let tpr = members.iter().filter(|&&l| l <= tau).count() as f64 / members.len() as f64;
    let tnr = nonmembers.iter().filter(|&&l| l > tau).count() as f64 / nonmembers.len() as f64;
    0.5 * (tpr + tnr)
}

/// Loss-threshold attack: predict "member" when the loss is at most `τ`.
/// Each list is split in half in order, so callers should pass losses in a
/// random order. The first halves pick the best of their sorted unique
/// losses by balanced accuracy (ties go to the lower value); `τ` is the
/// midpoint between that value and the next unique loss, and is then scored
/// on the second halves.
pub fn mi_attack(member_losses: &[f64], nonmember_losses: &[f64]) -> Result<MiOutcome> {
    if member_losses.len() < 2 || nonmember_losses.len() < 2 {
        return Err(Error::Input("membership inference needs at least two losses per group".into()));
    }
    if member_losses.iter().chain(nonmember_losses).any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("membership inference losses".into()));
    }
    let (ma, mb) = member_losses.split_at(member_losses.len() / 2);
    let (na, nb) = nonmember_losses.split_at(nonmember_losses.len() / 2);

    let mut pooled: Vec<(f64, bool)> = ma.iter().map(|&l| (l, true)).chain(na.iter().map(|&l| (l, false))).collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nm, nn) = (ma.len() as f64, na.len() as f64);
    let (mut below_m, mut below_n) = (0usize, 0usize);
    // (accuracy, index of the optimal unique value)
    let mut best = (f64::NEG_INFINITY, 0usize);
    let mut i = 0;
    while i < pooled.len() {
        let tau = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == tau {
            if pooled[i].1 {
                below_m += 1;
            } else {
                below_n += 1;
            }
            i += 1;
        }
        let acc = 0.5 * (below_m as f64 / nm + (nn - below_n as f64) / nn);
        if acc > best.0 {
            best = (acc, i - 1);
        }
    }
    let lower = pooled[best.1].0;
    let threshold = match pooled.get(best.1 + 1) {
        Some(&(next, _)) => 0.5 * (lower + next),
        None => lower,
    };
    Ok(MiOutcome { success_rate: balanced_accuracy(mb, nb, threshold), threshold, selection_rate: best.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableRankRecord {
    pub step: usize,
    pub layer: usize,
    pub stable_rank: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRecord {
    pub epoch: usize,
    pub layer: usize,
    pub hist_residual: f64,
    pub self_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiRecord {
    pub method: String,
    pub epsilon: Option<f64>,
    pub mi_success_rate: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn stable_rank_csv(records: &[StableRankRecord]) -> String {
    let mut out = String::from("step,layer,stable_rank\n");
    for r in records {
        writeln!(out, "{},{},{}", r.step, r.layer, opt(r.stable_rank)).unwrap();
    }
    out
}

pub fn residual_csv(records: &[ResidualRecord]) -> String {
    let mut out = String::from("epoch,layer,hist_residual,self_residual\n");
    for r in records {
        writeln!(out, "{},{},{},{}", r.epoch, r.layer, r.hist_residual, r.self_residual).unwrap();
    }
    out
}

pub fn mi_csv(records: &[MiRecord]) -> String {
    let mut out = String::from("method,epsilon,mi_success_rate\n");
    for r in records {
        writeln!(out, "{},{},{}", r.method, opt(r.epsilon), r.mi_success_rate).unwrap();
    }
    out
}
