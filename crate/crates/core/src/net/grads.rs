//! Per-sample gradient extraction.
//!
//! Each sample's gradient is stored as one flat vector: the concatenation over
//! all trainable layers of its weight-side blocks (`∂L`, `∂R` or `∂W`) and its
//! bias gradient. A [`GradLayout`] records where each block lives, and a
//! [`MemoryCounter`] tallies every float that was written.

use serde::{Deserialize, Serialize};

use super::{BatchActivations, Network};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Left,
    Right,
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub layer: usize,
    pub kind: SegmentKind,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GradLayout {
    pub segments: Vec<Segment>,
    pub len: usize,
}

impl GradLayout {
    fn push(&mut self, layer: usize, kind: SegmentKind, rows: usize, cols: usize) {
        self.segments.push(Segment { layer, kind, rows, cols, offset: self.len });
        self.len += rows * cols;
    }

    /// Splits a flat vector in this layout back into per-layer blocks.
    pub fn unpack(&self, flat: &[f64]) -> Result<Vec<LayerGrads>> {
        if flat.len() != self.len {
            return Err(Error::Shape(format!("vector of {} for layout of {}", flat.len(), self.len)));
        }
        let mut out: Vec<LayerGrads> = Vec::new();
        for seg in &self.segments {
            if out.last().is_none_or(|l| l.layer != seg.layer) {
                out.push(LayerGrads { layer: seg.layer, ..Default::default() });
            }
            let entry = out.last_mut().expect("pushed above");
            let block = &flat[seg.offset..seg.offset + seg.len()];
            match seg.kind {
                SegmentKind::Bias => entry.bias = block.to_vec(),
                kind => {
                    let m = Matrix::from_vec(seg.rows, seg.cols, block.to_vec())?;
                    match kind {
                        SegmentKind::Left => entry.left = Some(m),
                        SegmentKind::Right => entry.right = Some(m),
                        SegmentKind::Weight => entry.weight = Some(m),
                        SegmentKind::Bias => unreachable!(),
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Gradient blocks of one weight layer.
#[derive(Debug, Clone, Default)]
pub struct LayerGrads {
    pub layer: usize,
    pub left: Option<Matrix>,
    pub right: Option<Matrix>,
    pub weight: Option<Matrix>,
    pub bias: Vec<f64>,
}

/// Floats written while materializing per-sample gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryCounter {
    /// Carrier (`∂L`, `∂R`) or full weight (`∂W`) floats.
    pub weight_floats: usize,
    pub bias_floats: usize,
}

impl MemoryCounter {
    pub fn total(&self) -> usize {
        self.weight_floats + self.bias_floats
    }
}

/// The per-sample gradients of one minibatch.
#[derive(Debug, Clone)]
pub struct PerSampleGrads {
    pub layout: GradLayout,
    pub vectors: Vec<Vec<f64>>,
    pub counter: MemoryCounter,
}

impl PerSampleGrads {
    pub fn batch_size(&self) -> usize {
        self.vectors.len()
    }

    /// Sum over samples.
    pub fn sum(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.layout.len];
        for v in &self.vectors {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        acc
    }

    pub fn norms(&self) -> Vec<f64> {
        self.vectors.iter().map(|v| dot(v, v).sqrt()).collect()
    }
}

fn write_block(dst: &mut Vec<f64>, counter: &mut MemoryCounter, kind: SegmentKind, values: &[f64]) {
    match kind {
        SegmentKind::Bias => counter.bias_floats += values.len(),
        _ => counter.weight_floats += values.len(),
    }
    dst.extend_from_slice(values);
}

fn bias_grad(g: &Matrix) -> Vec<f64> {
    (0..g.rows()).map(|o| g.row(o).iter().sum()).collect()
}

/// `∂ᵢL = Gᵢ (R Aᵢ)ᵀ` and `∂ᵢR = (Lᵀ Gᵢ) Aᵢᵀ` for every sample, without
/// forming `∂ᵢW`.
pub(crate) fn per_sample_carrier(net: &Network, acts: &BatchActivations) -> Result<PerSampleGrads> {
    let positions = net.weight_positions();
    let mut layout = GradLayout::default();
    for (l, &pos) in positions.iter().enumerate() {
        let core = net.layers[pos].core().expect("weight layer");
        if !core.trainable {
            continue;
        }
        let c = core.require_carriers()?;
        layout.push(l, SegmentKind::Left, c.left.rows(), c.left.cols());
        layout.push(l, SegmentKind::Right, c.right.rows(), c.right.cols());
        layout.push(l, SegmentKind::Bias, 1, core.out_dim());
    }
    let mut counter = MemoryCounter::default();
    let mut vectors = Vec::with_capacity(acts.batch);
    for i in 0..acts.batch {
        let mut v = Vec::with_capacity(layout.len);
        for &pos in &positions {
            let core = net.layers[pos].core().expect("weight layer");
            if !core.trainable {
                continue;
            }
            let c = core.require_carriers()?;
            let (a, g) = acts.sample_signals(pos, i)?;
            let ra = c.right.matmul(&a)?;
            let dl = g.matmul_t(&ra)?;
            let dr = c.left.t_matmul(&g)?.matmul_t(&a)?;
            write_block(&mut v, &mut counter, SegmentKind::Left, dl.as_slice());
            write_block(&mut v, &mut counter, SegmentKind::Right, dr.as_slice());
            write_block(&mut v, &mut counter, SegmentKind::Bias, &bias_grad(&g));
        }
        vectors.push(v);
    }
    Ok(PerSampleGrads { layout, vectors, counter })
}

/// Explicit `∂ᵢW = Gᵢ Aᵢᵀ` for every sample.
pub(crate) fn per_sample_full(net: &Network, acts: &BatchActivations) -> Result<PerSampleGrads> {
    let positions = net.weight_positions();
    let mut layout = GradLayout::default();
    for (l, &pos) in positions.iter().enumerate() {
        let core = net.layers[pos].core().expect("weight layer");
        if !core.trainable {
            continue;
        }
        layout.push(l, SegmentKind::Weight, core.out_dim(), core.in_dim());
        layout.push(l, SegmentKind::Bias, 1, core.out_dim());
    }
    let mut counter = MemoryCounter::default();
    let mut vectors = Vec::with_capacity(acts.batch);
    for i in 0..acts.batch {
        let mut v = Vec::with_capacity(layout.len);
        for &pos in &positions {
            let core = net.layers[pos].core().expect("weight layer");
            if !core.trainable {
                continue;
            }
            let (a, g) = acts.sample_signals(pos, i)?;
            let dw = g.matmul_t(&a)?;
            write_block(&mut v, &mut counter, SegmentKind::Weight, dw.as_slice());
            write_block(&mut v, &mut counter, SegmentKind::Bias, &bias_grad(&g));
        }
        vectors.push(v);
    }
    Ok(PerSampleGrads { layout, vectors, counter })
}
