//! Flat key=value run configuration, the end-to-end experiment driver and
//! its artifacts (metrics JSON lines, binary model file, accountant ledger).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{
    mi_attack, mi_csv, residual_csv, stable_rank_csv, MiOutcome, MiRecord, ResidualRecord, StableRankRecord,
};
use crate::data::{grid_blobs, load_csv, load_idx, DataFormat, Dataset};
use crate::error::{Error, Result};
use crate::net::{per_sample_cross_entropy, ConvSpec, Network, NetworkSpec};
use crate::optimizer::{evaluate, train, Method, Sampling, TrainSettings};
use crate::privacy::calibrate_sigma;

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "RGP_OUTPUT_DIR";

pub const MODEL_MAGIC: [u8; 4] = *b"RGPM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `blobs` for the built-in generator, otherwise a file path.
    pub data: String,
    pub format: DataFormat,
    /// IDX label file; defaults to the image path with `images-idx3`
    /// replaced by `labels-idx1`.
    pub labels: Option<String>,
    pub test_data: Option<String>,
    pub test_labels: Option<String>,
    /// Held-out fraction when no test file is given.
    pub test_fraction: f64,
    pub blobs_n: usize,
    pub blobs_separation: f64,
    pub blobs_grid: usize,
    /// `(channels, height, width)` of CSV rows holding images.
    pub image: Option<(usize, usize, usize)>,
    pub conv: Vec<ConvSpec>,
    pub hidden: Vec<usize>,
    pub zero_head: bool,
    pub method: Method,
    pub rank: usize,
    pub power_iters: usize,
    pub warmup_steps: usize,
    pub clip: f64,
    pub sigma: Option<f64>,
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub q: Option<f64>,
    pub batch: Option<usize>,
    pub steps: Option<usize>,
    pub epochs: Option<f64>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub residual_enabled: bool,
    pub debug_dense_check: bool,
    pub track_stable_rank: bool,
    /// Stable-rank sampling period in epochs.
    pub stable_rank_epochs: f64,
    pub track_residuals: bool,
    pub mi_attack: bool,
    pub name: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: "blobs".into(),
            format: DataFormat::Csv,
            labels: None,
            test_data: None,
            test_labels: None,
            test_fraction: 0.2,
            blobs_n: 5000,
            blobs_separation: 3.0,
            blobs_grid: 1,
            image: None,
            conv: Vec::new(),
            hidden: vec![256, 256],
            zero_head: true,
            method: Method::Rgp,
            rank: 4,
            power_iters: 1,
            warmup_steps: 0,
            clip: 1.0,
            sigma: None,
            epsilon: None,
            delta: 1e-5,
            q: None,
            batch: None,
            steps: None,
            epochs: None,
            learning_rate: 0.1,
            momentum: 0.9,
            seed: 0,
            residual_enabled: true,
            debug_dense_check: false,
            track_stable_rank: false,
            stable_rank_epochs: 1.0,
            track_residuals: false,
            mi_attack: false,
            name: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn optional(value: &str) -> Option<&str> {
    match value {
        "" | "none" => None,
        v => Some(v),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply(line).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", idx + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies one `key=value` assignment.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => self.data = value.to_string(),
            "format" => self.format = value.parse()?,
            "labels" => self.labels = optional(value).map(String::from),
            "test_data" => self.test_data = optional(value).map(String::from),
            "test_labels" => self.test_labels = optional(value).map(String::from),
            "test_fraction" => self.test_fraction = parse(key, value)?,
            "blobs_n" => self.blobs_n = parse(key, value)?,
            "blobs_separation" => self.blobs_separation = parse(key, value)?,
            "blobs_grid" => self.blobs_grid = parse(key, value)?,
            "image" => {
                self.image = match optional(value) {
                    None => None,
                    Some(v) => match parse_list(key, v)?.as_slice() {
                        &[c, h, w] => Some((c, h, w)),
                        _ => return Err(Error::Config(format!("image: expected c,h,w, got {v:?}"))),
                    },
                }
            }
            "conv" => {
                self.conv = Vec::new();
                for layer in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let parts: Vec<usize> = layer.split(':').map(|p| parse(key, p)).collect::<Result<_>>()?;
                    match parts.as_slice() {
                        &[channels, kernel, stride, padding] => {
                            self.conv.push(ConvSpec { channels, kernel, stride, padding })
                        }
                        _ => return Err(Error::Config(format!("conv: expected channels:kernel:stride:padding, got {layer:?}"))),
                    }
                }
            }
            "hidden" => self.hidden = parse_list(key, value)?,
            "zero_head" => self.zero_head = parse_bool(key, value)?,
            "method" => self.method = value.parse()?,
            "rank" => self.rank = parse(key, value)?,
            "power_iters" => self.power_iters = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "sigma" => self.sigma = optional(value).map(|v| parse(key, v)).transpose()?,
            "epsilon" => self.epsilon = optional(value).map(|v| parse(key, v)).transpose()?,
            "delta" => self.delta = parse(key, value)?,
            "q" => self.q = optional(value).map(|v| parse(key, v)).transpose()?,
            "batch" => self.batch = optional(value).map(|v| parse(key, v)).transpose()?,
            "steps" => self.steps = optional(value).map(|v| parse(key, v)).transpose()?,
            "epochs" => self.epochs = optional(value).map(|v| parse(key, v)).transpose()?,
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "residual_enabled" => self.residual_enabled = parse_bool(key, value)?,
            "debug_dense_check" => self.debug_dense_check = parse_bool(key, value)?,
            "track_stable_rank" => self.track_stable_rank = parse_bool(key, value)?,
            "stable_rank_epochs" => self.stable_rank_epochs = parse(key, value)?,
            "track_residuals" => self.track_residuals = parse_bool(key, value)?,
            "mi_attack" => self.mi_attack = parse_bool(key, value)?,
            "name" => self.name = optional(value).map(String::from),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn run_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    fn sampling(&self) -> Result<Sampling> {
        match (self.q, self.batch) {
            (Some(q), None) => Ok(Sampling::Poisson { q }),
            (None, Some(batch)) => Ok(Sampling::Fixed { batch }),
            (None, None) => Err(Error::Config("one of q or batch is required".into())),
            (Some(_), Some(_)) => Err(Error::Config("q and batch are mutually exclusive".into())),
        }
    }

    fn step_count(&self, sampling: &Sampling, n: usize) -> Result<usize> {
        match (self.steps, self.epochs) {
            (Some(t), None) => Ok(t),
            (None, Some(e)) if e > 0.0 => Ok((e * n as f64 / sampling.expected_batch(n)).ceil() as usize),
            (None, Some(e)) => Err(Error::Config(format!("epochs {e}"))),
            (None, None) => Err(Error::Config("one of steps or epochs is required".into())),
            (Some(_), Some(_)) => Err(Error::Config("steps and epochs are mutually exclusive".into())),
        }
    }

    /// Checks the configuration against a training set of `n` samples and
    /// returns the training settings (σ left at its given value or 0 when it
    /// still needs calibration) plus warnings.
    pub fn resolve(&self, n: usize) -> Result<(TrainSettings, Vec<String>)> {
        let mut warnings = Vec::new();
        let sampling = self.sampling()?;
        let steps = self.step_count(&sampling, n)?;
        if steps == 0 {
            return Err(Error::Config("zero training steps".into()));
        }
        let private = self.method.is_private();
        if private {
            match (self.sigma, self.epsilon) {
                (Some(_), Some(_)) | (None, None) => {
                    return Err(Error::Config("exactly one of sigma or epsilon is required".into()))
                }
                _ => {}
            }
            if !(self.delta > 0.0 && self.delta < 1.0) {
                return Err(Error::Config(format!("delta {} outside (0, 1)", self.delta)));
            }
            if self.delta >= 1.0 / n as f64 {
                warnings.push(format!("delta {} is not below 1/n = {}", self.delta, 1.0 / n as f64));
            }
            if matches!(sampling, Sampling::Fixed { .. }) {
                warnings.push("fixed-size batches are accounted as Poisson sampling with q = batch/n".into());
            }
        }
        let mut s = TrainSettings::new(self.method, steps, sampling);
        s.learning_rate = self.learning_rate;
        s.momentum = self.momentum;
        s.clip = self.clip;
        s.sigma = self.sigma.unwrap_or(0.0);
        s.delta = private.then_some(self.delta);
        s.rank = self.rank;
        s.power_iters = self.power_iters;
        s.warmup_steps = self.warmup_steps;
        s.residual_enabled = self.residual_enabled;
        s.debug_dense_check = self.debug_dense_check;
        s.track_residuals = self.track_residuals;
        s.seed = self.seed;
        if self.track_stable_rank {
            let per_epoch = n as f64 / sampling.expected_batch(n);
            s.stable_rank_every = ((self.stable_rank_epochs * per_epoch).round() as usize).max(1);
        }
        Ok((s, warnings))
    }

    pub fn network_spec(&self, data: &Dataset) -> NetworkSpec {
        NetworkSpec {
            input_dim: data.features(),
            image_shape: self.image.or(data.image_shape),
            conv: self.conv.clone(),
            hidden: self.hidden.clone(),
            classes: data.classes,
            zero_head: self.zero_head,
        }
    }
}

fn idx_labels_path(images: &str) -> String {
    images.replace("images-idx3", "labels-idx1").replace("images.idx3", "labels.idx1")
}

fn load_file(path: &str, labels: Option<&str>, format: DataFormat) -> Result<Dataset> {
    match format {
        DataFormat::Csv => load_csv(Path::new(path)),
        DataFormat::Idx => {
            let labels = labels.map(String::from).unwrap_or_else(|| idx_labels_path(path));
            load_idx(Path::new(path), Path::new(&labels))
        }
    }
}

/// Training and test sets described by the configuration.
pub fn load_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let (all, test) = if cfg.data == "blobs" {
        (grid_blobs(cfg.blobs_n, cfg.blobs_grid, cfg.blobs_separation, cfg.seed)?, None)
    } else {
        let train = load_file(&cfg.data, cfg.labels.as_deref(), cfg.format)?;
        let test = cfg.test_data.as_deref().map(|p| load_file(p, cfg.test_labels.as_deref(), cfg.format)).transpose()?;
        (train, test)
    };
    let (mut train, mut test) = match test {
        Some(t) => (all, t),
        None => {
            if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
                return Err(Error::Config(format!("test_fraction {}", cfg.test_fraction)));
            }
            let n_test = ((all.len() as f64) * cfg.test_fraction).round() as usize;
            all.split(all.len() - n_test.clamp(1, all.len() - 1))?
        }
    };
    let classes = train.classes.max(test.classes);
    train.classes = classes;
    test.classes = classes;
    if train.features() != test.features() {
        return Err(Error::Input(format!("train has {} features, test {}", train.features(), test.features())));
    }
    Ok((train, test))
}

/// Weight-side floats one sample needs under each method, plus bias floats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub rgp_per_sample: usize,
    pub dpsgd_per_sample: usize,
    pub bias_per_sample: usize,
    /// Largest instrumented per-batch count seen during training.
    pub measured_peak: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub method: Method,
    pub sigma: Option<f64>,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub steps: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub initial_test_accuracy: f64,
    pub memory: MemoryReport,
    pub mi: Option<MiOutcome>,
    pub warnings: Vec<String>,
    pub metrics_path: PathBuf,
    pub model_path: PathBuf,
    pub ledger_path: Option<PathBuf>,
    /// Analysis CSVs written for the tracking flags that were set.
    pub csv_paths: Vec<PathBuf>,
}

/// Serializes every weight layer: magic `RGPM`, then little-endian `u32`
/// version and layer count; per layer `u32` rows, `u32` cols, `rows·cols`
/// `f64` weights row-major, then `rows` `f64` biases.
pub fn encode_model(net: &Network) -> Vec<u8> {
    let cores = net.weight_cores();
    let mut out = MODEL_MAGIC.to_vec();
    out.extend(MODEL_VERSION.to_le_bytes());
    out.extend((cores.len() as u32).to_le_bytes());
    for c in cores {
        out.extend((c.weight.rows() as u32).to_le_bytes());
        out.extend((c.weight.cols() as u32).to_le_bytes());
        for v in c.weight.as_slice().iter().chain(&c.bias) {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

/// Weight and bias per layer from [`encode_model`] bytes.
pub fn decode_model(bytes: &[u8]) -> Result<Vec<(crate::Matrix, Vec<f64>)>> {
    let bad = |msg: &str| Error::Input(format!("model file: {msg}"));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MODEL_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let version = u32_at(take(4)?);
    if version != MODEL_VERSION as usize {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let layers = u32_at(take(4)?);
    let mut out = Vec::with_capacity(layers);
    for _ in 0..layers {
        let rows = u32_at(take(4)?);
        let cols = u32_at(take(4)?);
        let raw = take(8 * (rows * cols + rows))?;
        let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let w = crate::Matrix::from_vec(rows, cols, vals[..rows * cols].to_vec())?;
        out.push((w, vals[rows * cols..].to_vec()));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

/// Members are the first `k` training samples and non-members the first `k`
/// test samples, `k = min(n_train, n_test)`.
pub fn membership_attack(net: &Network, train: &Dataset, test: &Dataset) -> Result<MiOutcome> {
    let k = train.len().min(test.len());
    let idx: Vec<usize> = (0..k).collect();
    let losses = |d: &Dataset| -> Result<Vec<f64>> {
        let b = d.batch(&idx);
        per_sample_cross_entropy(&net.predict(&b.x)?, &b.labels)
    };
    mi_attack(&losses(train)?, &losses(test)?)
}

fn memory_report(net: &Network, rank: usize, measured_peak: usize) -> MemoryReport {
    let mut r = MemoryReport { rgp_per_sample: 0, dpsgd_per_sample: 0, bias_per_sample: 0, measured_peak };
    for c in net.weight_cores() {
        let (p, d) = c.weight.shape();
        r.rgp_per_sample += rank.min(p).min(d) * (p + d);
        r.dpsgd_per_sample += p * d;
        r.bias_per_sample += p;
    }
    r
}

/// Output directory: the explicit argument, else `RGP_OUTPUT_DIR`, else
/// `./runs`.
pub fn output_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Loads data, calibrates σ if an ε target is set, trains, and writes
/// `<name>.metrics.jsonl`, `<name>.model` and (private methods)
/// `<name>.ledger` under `out_dir`.
pub fn run_experiment(cfg: &TrainConfig, out_dir: &Path) -> Result<ExperimentReport> {
    let (train_set, test_set) = load_data(cfg)?;
    run_on(cfg, &train_set, &test_set, out_dir)
}

/// Averages per-step residuals over each (epoch, layer).
fn epoch_means(steps: &[(usize, usize, f64, f64)]) -> Vec<ResidualRecord> {
    let mut out: Vec<(ResidualRecord, usize)> = Vec::new();
    for &(epoch, layer, h, s) in steps {
        match out.iter_mut().find(|(r, _)| r.epoch == epoch && r.layer == layer) {
            Some((r, k)) => {
                r.hist_residual += h;
                r.self_residual += s;
                *k += 1;
            }
            None => out.push((ResidualRecord { epoch, layer, hist_residual: h, self_residual: s }, 1)),
        }
    }
    out.into_iter()
        .map(|(mut r, k)| {
            r.hist_residual /= k as f64;
            r.self_residual /= k as f64;
            r
        })
        .collect()
}

/// One JSONL line with `record` as the leading key.
fn tagged(kind: &str, value: serde_json::Value) -> String {
    let mut map = serde_json::Map::new();
    map.insert("record".into(), kind.into());
    if let serde_json::Value::Object(fields) = value {
        map.extend(fields);
    }
    serde_json::Value::Object(map).to_string()
}

/// [`run_experiment`] on already loaded data.
pub fn run_on(cfg: &TrainConfig, train_set: &Dataset, test_set: &Dataset, out_dir: &Path) -> Result<ExperimentReport> {
    let n = train_set.len();
    let (mut settings, warnings) = cfg.resolve(n)?;
    if cfg.method.is_private() {
        if let Some(target) = cfg.epsilon {
            settings.sigma = calibrate_sigma(settings.sampling.rate(n), settings.steps as u64, target, cfg.delta)?;
        }
    }
    let mut net = Network::init(&cfg.network_spec(train_set), cfg.seed)?;
    let initial_test_accuracy = evaluate(&net, test_set)?;

    std::fs::create_dir_all(out_dir)?;
    let name = cfg.run_name();
    let metrics_path = out_dir.join(format!("{name}.metrics.jsonl"));
    let model_path = out_dir.join(format!("{name}.model"));
    let mut lines = Vec::with_capacity(settings.steps + 2);
    let resolved = json!({
        "record": "config",
        "config": cfg,
        "resolved": {
            "train_samples": n,
            "test_samples": test_set.len(),
            "steps": settings.steps,
            "sampling": settings.sampling,
            "sigma": cfg.method.is_private().then_some(settings.sigma),
            "mi_threshold_objective": "balanced_accuracy",
        },
    });
    lines.push(resolved.to_string());

    let rate = settings.sampling.rate(n);
    let mut ranks = Vec::new();
    let mut residuals = Vec::new();
    let outcome = train(&mut net, train_set, &settings, |m| {
        lines.push(tagged("step", serde_json::to_value(m)?));
        let epoch = ((m.step - 1) as f64 * rate).floor() as usize;
        for (layer, l) in m.layers.iter().enumerate() {
            if l.stable_rank.is_some() {
                ranks.push(StableRankRecord { step: m.step, layer, stable_rank: l.stable_rank });
            }
            if let (Some(h), Some(s)) = (l.hist_residual, l.self_residual) {
                residuals.push((epoch, layer, h, s));
            }
        }
        Ok(())
    })?;

    let train_accuracy = evaluate(&net, train_set)?;
    let test_accuracy = evaluate(&net, test_set)?;
    let mi = if cfg.mi_attack { Some(membership_attack(&net, train_set, test_set)?) } else { None };
    let epsilon = match &outcome.accountant {
        Some(acc) => Some(acc.epsilon(cfg.delta)?),
        None => None,
    };
    let memory = memory_report(&net, cfg.rank, outcome.peak_memory.total());
    let ledger_path = match &outcome.accountant {
        Some(acc) => {
            let p = out_dir.join(format!("{name}.ledger"));
            std::fs::write(&p, acc.to_ledger())?;
            Some(p)
        }
        None => None,
    };
    std::fs::write(&model_path, encode_model(&net))?;

    let mut csv_paths = Vec::new();
    let mut write_csv = |suffix: &str, text: String| -> Result<()> {
        let p = out_dir.join(format!("{name}.{suffix}.csv"));
        std::fs::write(&p, text)?;
        csv_paths.push(p);
        Ok(())
    };
    if cfg.track_stable_rank {
        write_csv("stable_rank", stable_rank_csv(&ranks))?;
    }
    if cfg.track_residuals {
        write_csv("residuals", residual_csv(&epoch_means(&residuals)))?;
    }
    if let Some(mi) = &mi {
        let record = MiRecord { method: cfg.method.name().into(), epsilon, mi_success_rate: mi.success_rate };
        write_csv("mi", mi_csv(&[record]))?;
    }

    let report = ExperimentReport {
        name,
        method: cfg.method,
        sigma: cfg.method.is_private().then_some(settings.sigma),
        epsilon,
        delta: cfg.method.is_private().then_some(cfg.delta),
        steps: outcome.steps,
        train_accuracy,
        test_accuracy,
        initial_test_accuracy,
        memory,
        mi,
        warnings,
        metrics_path: metrics_path.clone(),
        model_path,
        ledger_path,
        csv_paths,
    };
    lines.push(tagged("summary", serde_json::to_value(&report)?));
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(&metrics_path, text)?;
    Ok(report)
}

/// One run per rank, named `<name>-r<rank>`.
pub fn rank_sweep(cfg: &TrainConfig, ranks: &[usize], out_dir: &Path) -> Result<Vec<ExperimentReport>> {
    let (train_set, test_set) = load_data(cfg)?;
    ranks
        .iter()
        .map(|&r| {
            let mut c = cfg.clone();
            c.rank = r;
            c.name = Some(format!("{}-r{r}", cfg.run_name()));
            run_on(&c, &train_set, &test_set, out_dir)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let mut cfg = TrainConfig::parse("method = dpsgd\n# comment\nhidden = 8, 4\nq=0.1 # rate\nconv=4:3:1:1,8:3:2:1\n").unwrap();
        assert_eq!(cfg.method, Method::Dpsgd);
        assert_eq!(cfg.hidden, vec![8, 4]);
        assert_eq!(cfg.q, Some(0.1));
        assert_eq!(cfg.conv[1], ConvSpec { channels: 8, kernel: 3, stride: 2, padding: 1 });
        cfg.apply("sigma=none").unwrap();
        assert_eq!(cfg.sigma, None);
        cfg.apply("image=1,4,4").unwrap();
        assert_eq!(cfg.image, Some((1, 4, 4)));
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = TrainConfig::parse("rank=2\nbogus=1\n").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.starts_with("line 2")), "{err}");
        assert!(TrainConfig::parse("rank=two").is_err());
        assert!(TrainConfig::parse("just words").is_err());
    }

    #[test]
    fn resolve_checks_exclusive_fields() {
        let mut cfg = TrainConfig { q: Some(0.1), steps: Some(10), sigma: Some(1.0), ..Default::default() };
        assert!(cfg.resolve(100).is_ok());
        cfg.epsilon = Some(1.0);
        assert!(cfg.resolve(100).is_err());
        cfg.sigma = None;
        cfg.batch = Some(10);
        assert!(cfg.resolve(100).is_err());
        cfg.q = None;
        let (s, warnings) = cfg.resolve(100).unwrap();
        assert_eq!(s.sampling, Sampling::Fixed { batch: 10 });
        assert_eq!(warnings.len(), 1);
        cfg.delta = 0.05;
        assert_eq!(cfg.resolve(100).unwrap().1.len(), 2);
        cfg.steps = None;
        cfg.epochs = Some(2.0);
        assert_eq!(cfg.resolve(100).unwrap().0.steps, 20);
    }

    #[test]
    fn model_round_trip() {
        let spec = NetworkSpec { input_dim: 3, image_shape: None, conv: vec![], hidden: vec![4], classes: 2, zero_head: false };
        let net = Network::init(&spec, 1).unwrap();
        let bytes = encode_model(&net);
        assert_eq!(&bytes[..4], b"RGPM");
        assert_eq!(bytes.len(), 12 + 8 + 8 * (12 + 4) + 8 + 8 * (8 + 2));
        let layers = decode_model(&bytes).unwrap();
        assert_eq!(layers[0].0, net.core(0).weight);
        assert_eq!(layers[1].1, net.core(1).bias);
        assert!(decode_model(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn idx_label_path_default() {
        assert_eq!(idx_labels_path("d/train-images-idx3-ubyte"), "d/train-labels-idx1-ubyte");
    }
}
