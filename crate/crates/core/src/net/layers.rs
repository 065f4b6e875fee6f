//! Trainable layers and their reparametrized form.

use serde::{Deserialize, Serialize};

use super::conv::ConvGeometry;
use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;

/// The gradient carriers attached to a weight matrix `W` (p×d):
/// `left` is p×r, `right` is r×d.
#[derive(Debug, Clone, PartialEq)]
pub struct Carriers {
    pub left: Matrix,
    pub right: Matrix,
}

impl Carriers {
    pub fn rank(&self) -> usize {
        self.left.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerMode {
    Plain,
    Reparametrized,
}

/// Weight, bias and reparametrization state shared by dense and conv layers.
///
/// With carriers attached the layer computes `L(R a) + (W − LR) a` when the
/// residual is enabled and `L(R a)` otherwise; `W` itself never changes shape.
#[derive(Debug, Clone)]
pub struct ParamCore {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub residual_enabled: bool,
    pub trainable: bool,
    carriers: Option<Carriers>,
}

impl ParamCore {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(shape_err!("bias of {} for {} outputs", bias.len(), weight.rows()));
        }
        Ok(Self { weight, bias, residual_enabled: true, trainable: true, carriers: None })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn mode(&self) -> LayerMode {
        if self.carriers.is_some() {
            LayerMode::Reparametrized
        } else {
            LayerMode::Plain
        }
    }

    pub fn carriers(&self) -> Option<&Carriers> {
        self.carriers.as_ref()
    }

    pub fn set_carriers(&mut self, carriers: Carriers) -> Result<()> {
        let (p, d) = self.weight.shape();
        let r = carriers.left.cols();
        if carriers.left.rows() != p || carriers.right.shape() != (r, d) {
            return Err(shape_err!(
                "carriers {}x{} / {}x{} do not factor a {p}x{d} weight",
                carriers.left.rows(),
                carriers.left.cols(),
                carriers.right.rows(),
                carriers.right.cols()
            ));
        }
        self.carriers = Some(carriers);
        Ok(())
    }

    pub fn clear_carriers(&mut self) -> Option<Carriers> {
        self.carriers.take()
    }

    pub(crate) fn require_carriers(&self) -> Result<&Carriers> {
        self.carriers
            .as_ref()
            .ok_or_else(|| Error::Mode("per-sample carrier gradients need a reparametrized layer".into()))
    }

    /// `W − LR`.
    pub fn residual(&self) -> Option<Matrix> {
        self.carriers.as_ref().map(|c| {
            let lr = c.left.matmul(&c.right).expect("validated carrier shapes");
            self.weight.sub(&lr).expect("same shape")
        })
    }

    /// The weight the forward pass effectively applies.
    pub fn effective_weight(&self) -> Matrix {
        match &self.carriers {
            None => self.weight.clone(),
            Some(c) => {
                let lr = c.left.matmul(&c.right).expect("validated carrier shapes");
                if self.residual_enabled {
                    lr.add(&self.residual().expect("carriers present")).expect("same shape")
                } else {
                    lr
                }
            }
        }
    }

    /// Snapshot used by one forward/backward pass; the residual is formed once.
    pub(crate) fn prepare(&self) -> Prepared<'_> {
        let residual = if self.residual_enabled { self.residual() } else { None };
        Prepared { weight: &self.weight, carriers: self.carriers.as_ref(), residual }
    }
}

pub(crate) struct Prepared<'a> {
    weight: &'a Matrix,
    carriers: Option<&'a Carriers>,
    residual: Option<Matrix>,
}

impl Prepared<'_> {
    /// Applies the weight (no bias) to the columns of `a` (d×P), following
    /// the reparametrized computation path when carriers are set.
    pub(crate) fn apply_columns(&self, a: &Matrix) -> Result<Matrix> {
        match self.carriers {
            None => self.weight.matmul(a),
            Some(c) => {
                let mut out = c.left.matmul(&c.right.matmul(a)?)?;
                if let Some(res) = &self.residual {
                    out.axpy(1.0, &res.matmul(a)?)?;
                }
                Ok(out)
            }
        }
    }

    /// Applies the weight to each row of `x` (m×d), returning m×p.
    pub(crate) fn apply_rows(&self, x: &Matrix) -> Result<Matrix> {
        match self.carriers {
            None => x.matmul_t(self.weight),
            Some(c) => {
                let mut out = x.matmul_t(&c.right)?.matmul_t(&c.left)?;
                if let Some(res) = &self.residual {
                    out.axpy(1.0, &x.matmul_t(res)?)?;
                }
                Ok(out)
            }
        }
    }

    /// Back-propagates row-layout output gradients `g` (m×p) to the input (m×d).
    pub(crate) fn backprop_rows(&self, g: &Matrix) -> Result<Matrix> {
        match self.carriers {
            None => g.matmul(self.weight),
            Some(c) => {
                let mut out = g.matmul(&c.left)?.matmul(&c.right)?;
                if let Some(res) = &self.residual {
                    out.axpy(1.0, &g.matmul(res)?)?;
                }
                Ok(out)
            }
        }
    }

    /// Back-propagates column-layout output gradients `g` (p×P) to the
    /// patch space (d×P).
    pub(crate) fn backprop_columns(&self, g: &Matrix) -> Result<Matrix> {
        match self.carriers {
            None => self.weight.t_matmul(g),
            Some(c) => {
                let mut out = c.right.t_matmul(&c.left.t_matmul(g)?)?;
                if let Some(res) = &self.residual {
                    out.axpy(1.0, &res.t_matmul(g)?)?;
                }
                Ok(out)
            }
        }
    }
}

/// Fully connected layer `h = W x + b`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub core: ParamCore,
}

impl LinearLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        Ok(Self { core: ParamCore::new(weight, bias)? })
    }
}

/// Convolution whose canonical storage is the flattened kernel `W̄`
/// (p × c·k²); [`ConvLayer::kernel`] exposes the 4-D view.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub core: ParamCore,
    pub geometry: ConvGeometry,
}

impl ConvLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>, geometry: ConvGeometry) -> Result<Self> {
        if weight.cols() != geometry.patch_len() {
            return Err(shape_err!(
                "flattened kernel has {} columns, geometry needs {}",
                weight.cols(),
                geometry.patch_len()
            ));
        }
        Ok(Self { core: ParamCore::new(weight, bias)?, geometry })
    }

    pub fn out_channels(&self) -> usize {
        self.core.out_dim()
    }

    /// Kernel entry `[o][c][i][j]`.
    pub fn kernel(&self, o: usize, c: usize, i: usize, j: usize) -> f64 {
        let k = self.geometry.kernel;
        self.core.weight[(o, c * k * k + i * k + j)]
    }

    pub fn output_len(&self) -> usize {
        self.out_channels() * self.geometry.positions()
    }
}
