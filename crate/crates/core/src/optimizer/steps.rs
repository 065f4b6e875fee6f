use serde::{Deserialize, Serialize};

use super::{dense_projection, reconstruct_update, OptimizerState};
use crate::carriers::{power_decompose, project_out, projection_residual, random_carriers, svd_carriers, CarrierConfig, HistoryState};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::net::{loss_and_grad, Carriers, MemoryCounter, Network, PerSampleGrads, Reduction, SegmentKind};
use crate::privacy::{clip_in_place, gaussian_perturb, AccountantState, ClipConfig, NoiseConfig};
use crate::rng::{derive_seed, Stream};

/// A minibatch of samples (rows of `x`) with class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Step-invariant inputs shared by every step of a run.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    /// 1-based step index.
    pub step: usize,
    pub seed: u64,
    /// Divisor turning the noisy gradient sum into an average (expected batch
    /// size under Poisson sampling).
    pub normalizer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RgpSettings {
    pub rank: usize,
    pub power_iters: usize,
    /// Draw fresh random orthonormal carriers instead of decomposing history.
    pub random_carriers: bool,
    /// Also run dense backprop and check the reconstruction against the dense
    /// projection (reintroduces per-layer dense gradients).
    pub debug_dense_check: bool,
    pub track_residuals: bool,
}

impl RgpSettings {
    pub fn new(rank: usize, power_iters: usize) -> Self {
        Self {
            rank,
            power_iters,
            random_carriers: false,
            debug_dense_check: false,
            track_residuals: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerStepMetrics {
    pub rank: usize,
    pub update_norm: f64,
    /// `‖(I − LLᵀ)·update·(I − RᵀR)‖_F`, always zero up to round-off.
    pub out_of_span: Option<f64>,
    /// Relative gap between the noiseless reconstruction and the dense
    /// projection of the dense aggregate gradient.
    pub dense_check: Option<f64>,
    pub hist_residual: Option<f64>,
    pub self_residual: Option<f64>,
    pub stable_rank: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub batch_size: usize,
    pub loss: Option<f64>,
    pub norm_p10: Option<f64>,
    pub norm_median: Option<f64>,
    pub norm_p90: Option<f64>,
    pub clipped_fraction: Option<f64>,
    pub epsilon: Option<f64>,
    pub memory: MemoryCounter,
    pub layers: Vec<LayerStepMetrics>,
}

fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

fn fill_norm_stats(metrics: &mut StepMetrics, norms: &[f64], clip: f64) {
    let mut sorted = norms.to_vec();
    sorted.sort_by(f64::total_cmp);
    metrics.norm_p10 = quantile(&sorted, 0.1);
    metrics.norm_median = quantile(&sorted, 0.5);
    metrics.norm_p90 = quantile(&sorted, 0.9);
    if !norms.is_empty() {
        metrics.clipped_fraction = Some(norms.iter().filter(|&&n| n > clip).count() as f64 / norms.len() as f64);
    }
}

/// Dense (weight, bias) gradients per layer.
type DenseGrads = Vec<(Matrix, Vec<f64>)>;

/// Runs forward and backward on `batch`. Returns the per-sample gradients
/// (carrier-space when `carrier` is set), the dense aggregate gradients when
/// requested, and the batch loss.
fn per_sample_pass(
    net: &Network,
    batch: &Batch,
    carrier: bool,
    want_dense: bool,
) -> Result<(PerSampleGrads, Option<DenseGrads>, f64)> {
    let (logits, mut acts) = net.forward(&batch.x)?;
    let (loss, dlogits) = loss_and_grad(&logits, &batch.labels, Reduction::Sum)?;
    let grads = if carrier {
        net.backward_per_sample_carrier(&mut acts, &dlogits)?
    } else {
        net.backward_per_sample_full(&mut acts, &dlogits)?
    };
    let dense = if want_dense { Some(net.aggregate_grads(&acts)?) } else { None };
    Ok((grads, dense, loss))
}

/// Contiguous range of each trainable layer inside the flat layout.
fn layer_ranges(grads: &PerSampleGrads) -> Vec<(usize, std::ops::Range<usize>)> {
    let mut out: Vec<(usize, std::ops::Range<usize>)> = Vec::new();
    for seg in &grads.layout.segments {
        match out.last_mut() {
            Some((l, r)) if *l == seg.layer => r.end = seg.offset + seg.len(),
            _ => out.push((seg.layer, seg.offset..seg.offset + seg.len())),
        }
    }
    out
}

/// Clips each sample, sums, and adds layer-keyed Gaussian noise.
fn privatize(
    grads: &mut PerSampleGrads,
    clip: &ClipConfig,
    noise: &NoiseConfig,
    step: usize,
    metrics: &mut StepMetrics,
) -> Vec<f64> {
    let norms = clip_in_place(&mut grads.vectors, clip);
    fill_norm_stats(metrics, &norms, clip.threshold());
    let mut sum = grads.sum();
    for (layer, range) in layer_ranges(grads) {
        gaussian_perturb(&mut sum[range], noise, clip.threshold(), step as u64, layer as u64);
    }
    sum
}

/// The layout an empty batch would have produced.
fn empty_grads(net: &Network, carrier: bool) -> PerSampleGrads {
    use crate::net::{GradLayout, Segment};
    let mut layout = GradLayout::default();
    for (l, core) in net.weight_cores().iter().enumerate() {
        if !core.trainable {
            continue;
        }
        let blocks: Vec<(SegmentKind, usize, usize)> = match (carrier, core.carriers()) {
            (true, Some(c)) => vec![
                (SegmentKind::Left, c.left.rows(), c.left.cols()),
                (SegmentKind::Right, c.right.rows(), c.right.cols()),
                (SegmentKind::Bias, 1, core.out_dim()),
            ],
            _ => vec![(SegmentKind::Weight, core.out_dim(), core.in_dim()), (SegmentKind::Bias, 1, core.out_dim())],
        };
        for (kind, rows, cols) in blocks {
            layout.segments.push(Segment { layer: l, kind, rows, cols, offset: layout.len });
            layout.len += rows * cols;
        }
    }
    PerSampleGrads { layout, vectors: Vec::new(), counter: MemoryCounter::default() }
}

/// Carriers for every trainable layer at this step: the power-method
/// decomposition of `Δ_t` (or random orthonormal carriers), rank clamped to
/// `min(r, p, d)`, seeded by step and layer.
pub fn step_carriers(
    net: &Network,
    history: &HistoryState,
    settings: &RgpSettings,
    ctx: &StepContext,
) -> Result<Vec<Option<Carriers>>> {
    if history.initial.len() != net.num_weight_layers() {
        return Err(Error::Contract("history does not match the network".into()));
    }
    let mut out = Vec::with_capacity(history.initial.len());
    for (l, core) in net.weight_cores().into_iter().enumerate() {
        if !core.trainable {
            out.push(None);
            continue;
        }
        let (p, d) = core.weight.shape();
        let rank = settings.rank.min(p).min(d);
        let seed = derive_seed(ctx.seed, ctx.step as u64, l as u64, Stream::CarrierInit);
        let cfg = CarrierConfig::new(rank, settings.power_iters, seed);
        out.push(Some(if settings.random_carriers {
            random_carriers(p, d, &cfg)?
        } else {
            power_decompose(&history.delta(l, ctx.step, &core.weight)?, &cfg)?
        }));
    }
    Ok(out)
}

/// One RGP step: carriers from history (or random), reparametrized
/// forward/backward, clip the concatenated per-sample carrier gradients at
/// `C`, sum, perturb with `N(0, σ²C²)`, reconstruct each layer's update and
/// hand it to the optimizer. Advances the accountant by one step.
#[allow(clippy::too_many_arguments)]
pub fn rgp_step(
    net: &mut Network,
    batch: &Batch,
    history: &HistoryState,
    settings: &RgpSettings,
    clip: &ClipConfig,
    noise: &NoiseConfig,
    opt: &mut OptimizerState,
    accountant: &mut AccountantState,
    ctx: &StepContext,
) -> Result<StepMetrics> {
    let n_layers = net.num_weight_layers();
    let mut metrics = StepMetrics { step: ctx.step, batch_size: batch.len(), ..Default::default() };
    metrics.layers = vec![LayerStepMetrics::default(); n_layers];

    for (l, carriers) in step_carriers(net, history, settings, ctx)?.into_iter().enumerate() {
        if let Some(c) = carriers {
            metrics.layers[l].rank = c.rank();
            net.core_mut(l).set_carriers(c)?;
        }
    }

    let want_dense = settings.debug_dense_check || settings.track_residuals;
    let (mut grads, dense, unclipped) = if batch.is_empty() {
        (empty_grads(net, true), None, None)
    } else {
        let (g, dense, loss) = per_sample_pass(net, batch, true, want_dense)?;
        metrics.loss = Some(loss);
        let unclipped = if settings.debug_dense_check { Some(g.sum()) } else { None };
        (g, dense, unclipped)
    };
    metrics.memory = grads.counter;

    let noisy = privatize(&mut grads, clip, noise, ctx.step, &mut metrics);
    let blocks = grads.layout.unpack(&noisy)?;
    let clean = unclipped.map(|u| grads.layout.unpack(&u)).transpose()?;

    let mut updates: Vec<Option<(Matrix, Vec<f64>)>> = vec![None; n_layers];
    for (k, block) in blocks.into_iter().enumerate() {
        let l = block.layer;
        let c = net.core(l).carriers().expect("set above").clone();
        let (dl, dr) = (block.left.expect("carrier layout"), block.right.expect("carrier layout"));
        let mut update = reconstruct_update(&c.left, &c.right, &dl, &dr)?;
        let lm = &mut metrics.layers[l];
        if let (Some(clean), Some(dense)) = (&clean, &dense) {
            let cb = &clean[k];
            let recon = reconstruct_update(&c.left, &c.right, cb.left.as_ref().unwrap(), cb.right.as_ref().unwrap())?;
            let proj = dense_projection(&c.left, &c.right, &dense[l].0)?;
            let scale = proj.frobenius_norm().max(f64::MIN_POSITIVE);
            lm.dense_check = Some(recon.sub(&proj)?.frobenius_norm() / scale);
            lm.out_of_span = Some(project_out(&update, &c)?.frobenius_norm());
        }
        if let Some(dense) = &dense {
            let g = &dense[l].0;
            if settings.track_residuals && g.max_abs() > 0.0 {
                lm.hist_residual = Some(projection_residual(g, &c)?);
                lm.self_residual = Some(projection_residual(g, &svd_carriers(g, c.rank())?)?);
            }
        }
        update.scale_in_place(1.0 / ctx.normalizer);
        lm.update_norm = update.frobenius_norm();
        let bias: Vec<f64> = block.bias.iter().map(|b| b / ctx.normalizer).collect();
        updates[l] = Some((update, bias));
    }

    net.clear_carriers();
    opt.apply(net, updates)?;
    accountant.step();
    Ok(metrics)
}

/// DP-SGD: explicit per-sample weight gradients, clipped as one concatenated
/// vector per sample, summed and perturbed.
pub fn dpsgd_step(
    net: &mut Network,
    batch: &Batch,
    clip: &ClipConfig,
    noise: &NoiseConfig,
    opt: &mut OptimizerState,
    accountant: &mut AccountantState,
    ctx: &StepContext,
) -> Result<StepMetrics> {
    let n_layers = net.num_weight_layers();
    let mut metrics = StepMetrics { step: ctx.step, batch_size: batch.len(), ..Default::default() };
    metrics.layers = vec![LayerStepMetrics::default(); n_layers];
    let mut grads = if batch.is_empty() {
        empty_grads(net, false)
    } else {
        let (g, _, loss) = per_sample_pass(net, batch, false, false)?;
        metrics.loss = Some(loss);
        g
    };
    metrics.memory = grads.counter;
    let noisy = privatize(&mut grads, clip, noise, ctx.step, &mut metrics);
    let mut updates: Vec<Option<(Matrix, Vec<f64>)>> = vec![None; n_layers];
    for block in grads.layout.unpack(&noisy)? {
        let update = block.weight.expect("full layout").scale(1.0 / ctx.normalizer);
        metrics.layers[block.layer].update_norm = update.frobenius_norm();
        let bias = block.bias.iter().map(|b| b / ctx.normalizer).collect();
        updates[block.layer] = Some((update, bias));
    }
    opt.apply(net, updates)?;
    accountant.step();
    Ok(metrics)
}

/// Ordinary minibatch SGD on the mean loss; layers marked non-trainable are
/// left alone.
pub fn nonprivate_step(net: &mut Network, batch: &Batch, opt: &mut OptimizerState, ctx: &StepContext) -> Result<StepMetrics> {
    let n_layers = net.num_weight_layers();
    let mut metrics = StepMetrics { step: ctx.step, batch_size: batch.len(), ..Default::default() };
    metrics.layers = vec![LayerStepMetrics::default(); n_layers];
    if batch.is_empty() {
        opt.apply(net, vec![None; n_layers])?;
        return Ok(metrics);
    }
    let (logits, mut acts) = net.forward(&batch.x)?;
    let (loss, dlogits) = loss_and_grad(&logits, &batch.labels, Reduction::Mean)?;
    metrics.loss = Some(loss);
    net.backward(&mut acts, &dlogits)?;
    let dense = net.aggregate_grads(&acts)?;
    let trainable: Vec<bool> = net.weight_cores().iter().map(|c| c.trainable).collect();
    let updates = dense
        .into_iter()
        .zip(trainable)
        .enumerate()
        .map(|(l, (g, t))| {
            metrics.layers[l].update_norm = g.0.frobenius_norm();
            t.then_some(g)
        })
        .collect();
    opt.apply(net, updates)?;
    Ok(metrics)
}
