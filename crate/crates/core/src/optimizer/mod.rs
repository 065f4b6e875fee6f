//! One training step per method, the update reconstruction and momentum SGD.

mod steps;
mod train;

use serde::{Deserialize, Serialize};

pub use steps::{dpsgd_step, nonprivate_step, rgp_step, step_carriers, Batch, LayerStepMetrics, RgpSettings, StepContext, StepMetrics};
pub use train::{evaluate, train, Sampling, TrainOutcome, TrainSettings};

use crate::error::{Error, Result};
use crate::matrix::{orthonormality_error, Matrix};
use crate::net::Network;

/// Tolerance for the orthonormality premise of [`reconstruct_update`].
pub const ORTHONORMAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rgp,
    RgpRandom,
    Dpsgd,
    NonprivateFull,
    NonprivateLinear,
}

impl Method {
    pub fn is_private(&self) -> bool {
        matches!(self, Method::Rgp | Method::RgpRandom | Method::Dpsgd)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Rgp => "rgp",
            Method::RgpRandom => "rgp-random",
            Method::Dpsgd => "dpsgd",
            Method::NonprivateFull => "nonprivate-full",
            Method::NonprivateLinear => "nonprivate-linear",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rgp" => Method::Rgp,
            "rgp-random" => Method::RgpRandom,
            "dpsgd" => Method::Dpsgd,
            "nonprivate-full" => Method::NonprivateFull,
            "nonprivate-linear" => Method::NonprivateLinear,
            other => return Err(Error::Config(format!("unknown method {other:?}"))),
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `(∂L)R + L(∂R) − LLᵀ(∂L)R`: the update for `W` built from carrier
/// gradients. With orthonormal carriers and exact carrier gradients it is the
/// projection of `∂W` onto matrices whose column/row spaces lie in span(L) /
/// span(Rᵀ).
pub fn reconstruct_update(left: &Matrix, right: &Matrix, d_left: &Matrix, d_right: &Matrix) -> Result<Matrix> {
    let col_err = orthonormality_error(left);
    let row_err = orthonormality_error(&right.transpose());
    if col_err > ORTHONORMAL_TOL || row_err > ORTHONORMAL_TOL {
        return Err(Error::Contract(format!(
            "carriers not orthonormal (‖LᵀL − I‖ = {col_err:e}, ‖RRᵀ − I‖ = {row_err:e})"
        )));
    }
    let mut out = d_left.matmul(right)?;
    out.axpy(1.0, &left.matmul(d_right)?)?;
    let overlap = left.t_matmul(d_left)?;
    out.axpy(-1.0, &left.matmul(&overlap)?.matmul(right)?)?;
    Ok(out)
}

/// `LLᵀG + GRᵀR − LLᵀGRᵀR`, formed densely.
pub fn dense_projection(left: &Matrix, right: &Matrix, grad: &Matrix) -> Result<Matrix> {
    let llt_g = left.matmul(&left.t_matmul(grad)?)?;
    let g_rtr = grad.matmul_t(right)?.matmul(right)?;
    let both = llt_g.matmul_t(right)?.matmul(right)?;
    llt_g.add(&g_rtr)?.sub(&both)
}

/// Momentum SGD over every weight layer (`v ← μv + g`, `θ ← θ − ηv`).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub method: Method,
    velocity: Vec<(Matrix, Vec<f64>)>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(net: &Network, learning_rate: f64, momentum: f64, method: Method) -> Result<Self> {
        if !(learning_rate >= 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("learning rate {learning_rate}, momentum {momentum}")));
        }
        let velocity = net
            .weight_cores()
            .iter()
            .map(|c| (Matrix::zeros(c.weight.rows(), c.weight.cols()), vec![0.0; c.bias.len()]))
            .collect();
        Ok(Self { learning_rate, momentum, method, velocity, steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one gradient per weight layer; `None` leaves a layer untouched.
    pub fn apply(&mut self, net: &mut Network, grads: Vec<Option<(Matrix, Vec<f64>)>>) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::Contract(format!("{} gradients for {} layers", grads.len(), self.velocity.len())));
        }
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((core, (vw, vb)), g) in net.weight_cores_mut().into_iter().zip(&mut self.velocity).zip(grads) {
            let Some((gw, gb)) = g else { continue };
            if gw.shape() != vw.shape() || gb.len() != vb.len() {
                return Err(Error::Shape("gradient does not match its parameter".into()));
            }
            vw.scale_in_place(mu);
            vw.axpy(1.0, &gw)?;
            core.weight.axpy(-lr, vw)?;
            for ((b, v), g) in core.bias.iter_mut().zip(vb.iter_mut()).zip(&gb) {
                *v = mu * *v + g;
                *b -= lr * *v;
            }
        }
        self.steps += 1;
        Ok(())
    }
}
