//! A small reverse-mode network: dense and convolutional layers with ReLU,
//! caching exactly what per-sample gradients need.

mod conv;
mod grads;
mod layers;
mod loss;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use conv::ConvGeometry;
pub use grads::{GradLayout, LayerGrads, MemoryCounter, PerSampleGrads, Segment, SegmentKind};
pub use layers::{Carriers, ConvLayer, LayerMode, LinearLayer, ParamCore};
pub use loss::{loss_and_grad, mse_and_grad, per_sample_cross_entropy, predictions, Reduction};

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::rng::{keyed_rng, Stream};

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(LinearLayer),
    Conv(ConvLayer),
    Relu,
}

impl Layer {
    pub fn core(&self) -> Option<&ParamCore> {
        match self {
            Layer::Linear(l) => Some(&l.core),
            Layer::Conv(c) => Some(&c.core),
            Layer::Relu => None,
        }
    }

    pub fn core_mut(&mut self) -> Option<&mut ParamCore> {
        match self {
            Layer::Linear(l) => Some(&mut l.core),
            Layer::Conv(c) => Some(&mut c.core),
            Layer::Relu => None,
        }
    }
}

/// One convolution stage of a [`NetworkSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Architecture description: optional conv stack over an image input, then
/// ReLU hidden dense layers, then a linear classification head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    /// `(channels, height, width)`; required when `conv` is non-empty.
    pub image_shape: Option<(usize, usize, usize)>,
    pub conv: Vec<ConvSpec>,
    pub hidden: Vec<usize>,
    pub classes: usize,
    /// Start the head at zero so the initial model predicts every class
    /// equally.
    pub zero_head: bool,
}

fn he_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let std = (2.0 / cols as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// Sequential network. Samples are rows of the input matrix; conv feature maps
/// are flattened channel-major.
#[derive(Debug, Clone)]
pub struct Network {
    input_dim: usize,
    layers: Vec<Layer>,
}

/// What a weight layer remembered from the forward pass.
#[derive(Debug, Clone)]
enum Tape {
    Dense { input: Matrix, grad_out: Option<Matrix> },
    Conv { patches: Vec<Matrix>, grad_out: Vec<Matrix> },
    Relu { mask: Vec<bool> },
}

/// Per-layer cached inputs and, after [`Network::backward`], output-gradient
/// signals for every sample of one minibatch.
#[derive(Debug, Clone)]
pub struct BatchActivations {
    tapes: Vec<Tape>,
    batch: usize,
    has_grads: bool,
}

impl BatchActivations {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn has_grads(&self) -> bool {
        self.has_grads
    }

    /// Input patches `A_i` (d×P) and output gradients `G_i` (p×P) of sample
    /// `i` at layer position `pos`. Dense layers have `P = 1`.
    pub(crate) fn sample_signals(&self, pos: usize, i: usize) -> Result<(Matrix, Matrix)> {
        if !self.has_grads {
            return Err(Error::Contract("backward has not run on these activations".into()));
        }
        match &self.tapes[pos] {
            Tape::Dense { input, grad_out: Some(g) } => {
                Ok((Matrix::column_vector(input.row(i)), Matrix::column_vector(g.row(i))))
            }
            Tape::Conv { patches, grad_out } => Ok((patches[i].clone(), grad_out[i].clone())),
            _ => Err(Error::Contract(format!("layer {pos} has no weight tape"))),
        }
    }

    pub(crate) fn dense_signals(&self, pos: usize) -> Option<(&Matrix, &Matrix)> {
        match &self.tapes[pos] {
            Tape::Dense { input, grad_out: Some(g) } => Some((input, g)),
            _ => None,
        }
    }
}

impl Network {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let net = Self { input_dim, layers };
        net.check_dims()?;
        Ok(net)
    }

    /// Builds and initializes a network: He-normal weights, zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = keyed_rng(seed, 0, 0, Stream::WeightInit);
        let mut layers = Vec::new();
        let mut width = spec.input_dim;
        if !spec.conv.is_empty() {
            let (mut c, mut h, mut w) = spec
                .image_shape
                .ok_or_else(|| Error::Config("conv layers need an image shape".into()))?;
            if c * h * w != spec.input_dim {
                return Err(shape_err!("image shape {c}x{h}x{w} does not match input dim {}", spec.input_dim));
            }
            for cs in &spec.conv {
                let g = ConvGeometry::new(c, h, w, cs.kernel, cs.stride, cs.padding)?;
                let weight = he_matrix(cs.channels, g.patch_len(), &mut rng);
                layers.push(Layer::Conv(ConvLayer::new(weight, vec![0.0; cs.channels], g)?));
                layers.push(Layer::Relu);
                (c, h, w) = (cs.channels, g.out_h(), g.out_w());
            }
            width = c * h * w;
        }
        for &hdim in &spec.hidden {
            layers.push(Layer::Linear(LinearLayer::new(he_matrix(hdim, width, &mut rng), vec![0.0; hdim])?));
            layers.push(Layer::Relu);
            width = hdim;
        }
        let head = if spec.zero_head {
            Matrix::zeros(spec.classes, width)
        } else {
            he_matrix(spec.classes, width, &mut rng)
        };
        layers.push(Layer::Linear(LinearLayer::new(head, vec![0.0; spec.classes])?));
        Self::new(spec.input_dim, layers)
    }

    fn check_dims(&self) -> Result<()> {
        let mut width = self.input_dim;
        for (pos, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear(l) => {
                    if l.core.in_dim() != width {
                        return Err(shape_err!("layer {pos} expects {} inputs, gets {width}", l.core.in_dim()));
                    }
                    width = l.core.out_dim();
                }
                Layer::Conv(c) => {
                    if c.geometry.input_len() != width {
                        return Err(shape_err!(
                            "conv layer {pos} expects {} inputs, gets {width}",
                            c.geometry.input_len()
                        ));
                    }
                    width = c.output_len();
                }
                Layer::Relu => {}
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.weight_cores().last().map_or(self.input_dim, |c| c.out_dim())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Positions in [`layers`](Self::layers) of the layers holding weights.
    pub fn weight_positions(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.core().is_some()).map(|(i, _)| i).collect()
    }

    /// Weight layers in order; indices into this list are the "layer index"
    /// used throughout the crate.
    pub fn weight_cores(&self) -> Vec<&ParamCore> {
        self.layers.iter().filter_map(Layer::core).collect()
    }

    pub fn weight_cores_mut(&mut self) -> Vec<&mut ParamCore> {
        self.layers.iter_mut().filter_map(Layer::core_mut).collect()
    }

    pub fn num_weight_layers(&self) -> usize {
        self.weight_positions().len()
    }

    pub fn core(&self, layer: usize) -> &ParamCore {
        self.weight_cores()[layer]
    }

    pub fn core_mut(&mut self, layer: usize) -> &mut ParamCore {
        self.weight_cores_mut().swap_remove(layer)
    }

    pub fn set_residual_enabled(&mut self, enabled: bool) {
        for core in self.weight_cores_mut() {
            core.residual_enabled = enabled;
        }
    }

    pub fn clear_carriers(&mut self) {
        for core in self.weight_cores_mut() {
            core.clear_carriers();
        }
    }

    /// Marks only the final weight layer as trainable when `head_only`.
    pub fn set_head_only(&mut self, head_only: bool) {
        let mut cores = self.weight_cores_mut();
        let last = cores.len() - 1;
        for (i, core) in cores.iter_mut().enumerate() {
            core.trainable = !head_only || i == last;
        }
    }

    /// Total trainable scalars (weights and biases).
    pub fn num_parameters(&self) -> usize {
        self.weight_cores().iter().filter(|c| c.trainable).map(|c| c.weight.len() + c.bias.len()).sum()
    }

    /// Forward pass without caching.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.run_forward(x, false).map(|(out, _)| out)
    }

    /// Forward pass caching per-layer inputs for backward.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, BatchActivations)> {
        let (out, tapes) = self.run_forward(x, true)?;
        Ok((out, BatchActivations { tapes, batch: x.rows(), has_grads: false }))
    }

    fn run_forward(&self, x: &Matrix, record: bool) -> Result<(Matrix, Vec<Tape>)> {
        if x.rows() == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if x.cols() != self.input_dim {
            return Err(shape_err!("batch has {} features, network expects {}", x.cols(), self.input_dim));
        }
        let mut tapes = Vec::with_capacity(if record { self.layers.len() } else { 0 });
        let mut h = x.clone();
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) => {
                    let mut out = l.core.prepare().apply_rows(&h)?;
                    add_bias_rows(&mut out, &l.core.bias);
                    if record {
                        tapes.push(Tape::Dense { input: h, grad_out: None });
                    }
                    h = out;
                }
                Layer::Conv(c) => {
                    let prep = c.core.prepare();
                    let positions = c.geometry.positions();
                    let mut out = Matrix::zeros(h.rows(), c.output_len());
                    let mut patches = Vec::with_capacity(if record { h.rows() } else { 0 });
                    for i in 0..h.rows() {
                        let a = c.geometry.im2col(h.row(i))?;
                        let y = prep.apply_columns(&a)?;
                        let dst = out.row_mut(i);
                        for o in 0..c.out_channels() {
                            let b = c.core.bias[o];
                            for (d, v) in dst[o * positions..(o + 1) * positions].iter_mut().zip(y.row(o)) {
                                *d = v + b;
                            }
                        }
                        if record {
                            patches.push(a);
                        }
                    }
                    if record {
                        tapes.push(Tape::Conv { patches, grad_out: Vec::new() });
                    }
                    h = out;
                }
                Layer::Relu => {
                    let mask: Vec<bool> = h.as_slice().iter().map(|v| *v > 0.0).collect();
                    for (v, keep) in h.as_mut_slice().iter_mut().zip(&mask) {
                        if !keep {
                            *v = 0.0;
                        }
                    }
                    if record {
                        tapes.push(Tape::Relu { mask });
                    }
                }
            }
        }
        Ok((h, tapes))
    }

    /// Propagates `dlogits` (gradient of the loss with respect to the network
    /// output) back through the cached batch, storing each weight layer's
    /// output-gradient signal.
    pub fn backward(&self, acts: &mut BatchActivations, dlogits: &Matrix) -> Result<()> {
        if acts.tapes.len() != self.layers.len() {
            return Err(Error::Contract("activations come from a different network".into()));
        }
        if dlogits.shape() != (acts.batch, self.output_dim()) {
            return Err(shape_err!("output gradient {:?} for batch {} x {}", dlogits.shape(), acts.batch, self.output_dim()));
        }
        let mut g = dlogits.clone();
        for pos in (0..self.layers.len()).rev() {
            let need_input_grad = pos > 0;
            match (&self.layers[pos], &mut acts.tapes[pos]) {
                (Layer::Linear(l), Tape::Dense { grad_out, .. }) => {
                    let next = if need_input_grad { Some(l.core.prepare().backprop_rows(&g)?) } else { None };
                    *grad_out = Some(g);
                    match next {
                        Some(n) => g = n,
                        None => break,
                    }
                }
                (Layer::Conv(c), Tape::Conv { grad_out, .. }) => {
                    let prep = c.core.prepare();
                    let positions = c.geometry.positions();
                    let mut next = Matrix::zeros(g.rows(), c.geometry.input_len());
                    grad_out.clear();
                    for i in 0..g.rows() {
                        let gi = Matrix::from_vec(c.out_channels(), positions, g.row(i).to_vec())?;
                        if need_input_grad {
                            let da = prep.backprop_columns(&gi)?;
                            next.row_mut(i).copy_from_slice(&c.geometry.col2im(&da));
                        }
                        grad_out.push(gi);
                    }
                    if !need_input_grad {
                        break;
                    }
                    g = next;
                }
                (Layer::Relu, Tape::Relu { mask }) => {
                    for (v, keep) in g.as_mut_slice().iter_mut().zip(mask.iter()) {
                        if !keep {
                            *v = 0.0;
                        }
                    }
                }
                _ => return Err(Error::Contract(format!("tape mismatch at layer {pos}"))),
            }
        }
        acts.has_grads = true;
        Ok(())
    }

    /// Aggregated (summed over the batch) dense weight and bias gradients of
    /// every weight layer, computed by ordinary backprop.
    pub fn aggregate_grads(&self, acts: &BatchActivations) -> Result<Vec<(Matrix, Vec<f64>)>> {
        if !acts.has_grads {
            return Err(Error::Contract("backward has not run on these activations".into()));
        }
        let mut out = Vec::new();
        for pos in self.weight_positions() {
            let core = self.layers[pos].core().expect("weight layer");
            if let Some((x, g)) = acts.dense_signals(pos) {
                let dw = g.t_matmul(x)?;
                let mut db = vec![0.0; core.out_dim()];
                for i in 0..g.rows() {
                    for (b, v) in db.iter_mut().zip(g.row(i)) {
                        *b += v;
                    }
                }
                out.push((dw, db));
            } else {
                let mut dw = Matrix::zeros(core.out_dim(), core.in_dim());
                let mut db = vec![0.0; core.out_dim()];
                for i in 0..acts.batch {
                    let (a, g) = acts.sample_signals(pos, i)?;
                    dw.axpy(1.0, &g.matmul_t(&a)?)?;
                    for (o, b) in db.iter_mut().enumerate() {
                        *b += g.row(o).iter().sum::<f64>();
                    }
                }
                out.push((dw, db));
            }
        }
        Ok(out)
    }

    /// Runs backward from `dlogits` and returns per-sample carrier gradients.
    pub fn backward_per_sample_carrier(
        &self,
        acts: &mut BatchActivations,
        dlogits: &Matrix,
    ) -> Result<PerSampleGrads> {
        self.backward(acts, dlogits)?;
        grads::per_sample_carrier(self, acts)
    }

    /// Runs backward from `dlogits` and returns explicit per-sample weight
    /// gradients.
    pub fn backward_per_sample_full(&self, acts: &mut BatchActivations, dlogits: &Matrix) -> Result<PerSampleGrads> {
        self.backward(acts, dlogits)?;
        grads::per_sample_full(self, acts)
    }
}

fn add_bias_rows(out: &mut Matrix, bias: &[f64]) {
    for i in 0..out.rows() {
        for (v, b) in out.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
}
