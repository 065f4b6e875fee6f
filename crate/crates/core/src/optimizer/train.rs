use rand::Rng;
use serde::{Deserialize, Serialize};

use super::steps::{dpsgd_step, nonprivate_step, rgp_step, Batch, RgpSettings, StepContext, StepMetrics};
use super::{Method, OptimizerState};
use crate::carriers::HistoryState;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{predictions, MemoryCounter, Network};
use crate::privacy::{AccountantState, ClipConfig, NoiseConfig};
use crate::rng::{keyed_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Sampling {
    /// Each sample joins a batch independently with probability `q`.
    Poisson { q: f64 },
    /// Uniform batches of fixed size without replacement. The accountant
    /// treats this as Poisson with `q = batch / n`, which is an approximation.
    Fixed { batch: usize },
}

impl Sampling {
    pub fn rate(&self, n: usize) -> f64 {
        match *self {
            Sampling::Poisson { q } => q,
            Sampling::Fixed { batch } => batch as f64 / n as f64,
        }
    }

    /// Expected batch size, used to average the summed gradients.
    pub fn expected_batch(&self, n: usize) -> f64 {
        match *self {
            Sampling::Poisson { q } => q * n as f64,
            Sampling::Fixed { batch } => batch as f64,
        }
    }

    fn draw(&self, n: usize, seed: u64, step: usize) -> Vec<usize> {
        let mut rng = keyed_rng(seed, step as u64, 0, Stream::Sampling);
        match *self {
            Sampling::Poisson { q } => (0..n).filter(|_| rng.random::<f64>() < q).collect(),
            Sampling::Fixed { batch } => {
                let mut idx = rand::seq::index::sample(&mut rng, n, batch).into_vec();
                idx.sort_unstable();
                idx
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub method: Method,
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub sampling: Sampling,
    pub clip: f64,
    pub sigma: f64,
    /// When set, every step reports ε at this δ.
    pub delta: Option<f64>,
    pub rank: usize,
    pub power_iters: usize,
    pub warmup_steps: usize,
    pub residual_enabled: bool,
    pub debug_dense_check: bool,
    pub track_residuals: bool,
    /// Record dense-gradient stable ranks every this many steps (0 = never).
    pub stable_rank_every: usize,
    pub seed: u64,
}

impl TrainSettings {
    pub fn new(method: Method, steps: usize, sampling: Sampling) -> Self {
        Self {
            method,
            steps,
            learning_rate: 0.1,
            momentum: 0.9,
            sampling,
            clip: 1.0,
            sigma: 1.0,
            delta: None,
            rank: 4,
            power_iters: 1,
            warmup_steps: 0,
            residual_enabled: true,
            debug_dense_check: false,
            track_residuals: false,
            stable_rank_every: 0,
            seed: 0,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self.sampling {
            Sampling::Poisson { q } if !(q > 0.0 && q <= 1.0) => {
                return Err(Error::Config(format!("sampling rate {q} outside (0, 1]")))
            }
            Sampling::Fixed { batch } if batch == 0 || batch > n => {
                return Err(Error::Config(format!("batch size {batch} for {n} samples")))
            }
            _ => {}
        }
        if self.method.is_private() {
            ClipConfig::new(self.clip)?;
            NoiseConfig::new(self.sigma, self.seed)?;
        }
        if matches!(self.method, Method::Rgp | Method::RgpRandom) && (self.rank == 0 || self.power_iters == 0) {
            return Err(Error::Config("rank and power iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    pub accountant: Option<AccountantState>,
    /// Largest per-sample gradient footprint seen in any step.
    pub peak_memory: MemoryCounter,
    pub final_loss: Option<f64>,
}

/// Runs `settings.steps` steps of the chosen method on `data`, calling
/// `observe` after each one.
pub fn train<F>(net: &mut Network, data: &Dataset, settings: &TrainSettings, mut observe: F) -> Result<TrainOutcome>
where
    F: FnMut(&StepMetrics) -> Result<()>,
{
    let n = data.len();
    settings.validate(n)?;
    net.set_residual_enabled(settings.residual_enabled);
    net.set_head_only(settings.method == Method::NonprivateLinear);
    let mut opt = OptimizerState::new(net, settings.learning_rate, settings.momentum, settings.method)?;
    let private = settings.method.is_private();
    let mut accountant =
        if private { Some(AccountantState::new(settings.sampling.rate(n), settings.sigma)?) } else { None };
    let history = HistoryState::new(net.weight_cores().iter().map(|c| c.weight.clone()).collect(), settings.warmup_steps);
    let rgp = RgpSettings {
        rank: settings.rank,
        power_iters: settings.power_iters,
        random_carriers: settings.method == Method::RgpRandom,
        debug_dense_check: settings.debug_dense_check,
        track_residuals: settings.track_residuals,
    };
    let mut outcome = TrainOutcome { steps: 0, accountant: None, peak_memory: MemoryCounter::default(), final_loss: None };

    for step in 1..=settings.steps {
        let batch = data.batch(&settings.sampling.draw(n, settings.seed, step));
        let stable = if settings.stable_rank_every > 0 && step % settings.stable_rank_every == 0 && !batch.is_empty() {
            Some(crate::analysis::track_stable_rank(net, &batch)?)
        } else {
            None
        };
        let ctx = StepContext { step, seed: settings.seed, normalizer: settings.sampling.expected_batch(n) };
        let mut metrics = match (settings.method, accountant.as_mut()) {
            (Method::Rgp | Method::RgpRandom, Some(acc)) => {
                let clip = ClipConfig::new(settings.clip)?;
                let noise = NoiseConfig::new(settings.sigma, settings.seed)?;
                rgp_step(net, &batch, &history, &rgp, &clip, &noise, &mut opt, acc, &ctx)?
            }
            (Method::Dpsgd, Some(acc)) => {
                let clip = ClipConfig::new(settings.clip)?;
                let noise = NoiseConfig::new(settings.sigma, settings.seed)?;
                dpsgd_step(net, &batch, &clip, &noise, &mut opt, acc, &ctx)?
            }
            _ => nonprivate_step(net, &batch, &mut opt, &ctx)?,
        };
        if let Some(ranks) = stable {
            for (lm, sr) in metrics.layers.iter_mut().zip(ranks) {
                lm.stable_rank = sr;
            }
        }
        if let (Some(acc), Some(delta)) = (&accountant, settings.delta) {
            metrics.epsilon = Some(acc.epsilon(delta)?);
        }
        if metrics.memory.total() > outcome.peak_memory.total() {
            outcome.peak_memory = metrics.memory;
        }
        if metrics.loss.is_some() {
            outcome.final_loss = metrics.loss;
        }
        observe(&metrics)?;
        outcome.steps = step;
    }
    net.set_head_only(false);
    if let Some(acc) = &accountant {
        debug_assert_eq!(acc.steps(), opt.steps());
    }
    outcome.accountant = accountant;
    Ok(outcome)
}

/// Fraction of samples whose arg-max prediction equals the label.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    const CHUNK: usize = 1024;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let Batch { x, labels } = data.batch(chunk);
        let pred = predictions(&net.predict(&x)?);
        correct += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
