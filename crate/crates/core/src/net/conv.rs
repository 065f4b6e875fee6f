//! Convolution geometry and the im2col / col2im transforms.
//!
//! A sample's feature map is stored channel-major (`c × h × w`, row-major).
//! `im2col` turns it into a `(c·k·k) × (out_h·out_w)` patch matrix so that a
//! convolution with kernel `p × c × k × k` is the product `W̄ · patches` with
//! the flattened kernel `W̄` of shape `p × c·k²`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let g = Self { in_channels, in_h, in_w, kernel, stride, padding };
        if in_channels == 0 || kernel == 0 || stride == 0 {
            return Err(shape_err!("conv needs positive channels, kernel and stride"));
        }
        if in_h + 2 * padding < kernel || in_w + 2 * padding < kernel {
            return Err(shape_err!("kernel {kernel} larger than padded input {in_h}x{in_w}"));
        }
        Ok(g)
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Spatial output positions per sample.
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Length of one flattened receptive field, `c·k²`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    /// Source offset into the input for patch row `row` at output `(oy, ox)`,
    /// or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, row: usize, oy: usize, ox: usize) -> Option<usize> {
        let kk = self.kernel * self.kernel;
        let ci = row / kk;
        let ki = (row % kk) / self.kernel;
        let kj = row % self.kernel;
        let y = (oy * self.stride + ki) as isize - self.padding as isize;
        let x = (ox * self.stride + kj) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
            return None;
        }
        Some(ci * self.in_h * self.in_w + y as usize * self.in_w + x as usize)
    }

    pub fn im2col(&self, input: &[f64]) -> Result<Matrix> {
        if input.len() != self.input_len() {
            return Err(shape_err!("conv input of {} values, expected {}", input.len(), self.input_len()));
        }
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut cols = Matrix::zeros(self.patch_len(), oh * ow);
        for row in 0..self.patch_len() {
            let dst = cols.row_mut(row);
            for oy in 0..oh {
                for ox in 0..ow {
                    if let Some(src) = self.source(row, oy, ox) {
                        dst[oy * ow + ox] = input[src];
                    }
                }
            }
        }
        Ok(cols)
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters patch gradients back
    /// onto the input map.
    pub fn col2im(&self, cols: &Matrix) -> Vec<f64> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut out = vec![0.0; self.input_len()];
        for row in 0..self.patch_len() {
            let src = cols.row(row);
            for oy in 0..oh {
                for ox in 0..ow {
                    if let Some(dst) = self.source(row, oy, ox) {
                        out[dst] += src[oy * ow + ox];
                    }
                }
            }
        }
        out
    }
}
