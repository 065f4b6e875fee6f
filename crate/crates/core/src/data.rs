//! Datasets: CSV and IDX loaders plus the seeded two-class blobs generator.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::optimizer::Batch;
use crate::rng::{keyed_rng, Stream};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Idx,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "idx" => Ok(DataFormat::Idx),
            other => Err(Error::Config(format!("unknown data format {other:?}"))),
        }
    }
}

/// Samples as rows of `x` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// `(channels, height, width)` when rows are flattened images.
    pub image_shape: Option<(usize, usize, usize)>,
}

impl Dataset {
    pub fn new(x: Matrix, labels: Vec<usize>) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::Input(format!("{} samples but {} labels", x.rows(), labels.len())));
        }
        if labels.is_empty() {
            return Err(Error::Input("empty dataset".into()));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
        Ok(Self { x, labels, classes, image_shape: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.cols()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch { x: self.x.select_rows(indices), labels: indices.iter().map(|&i| self.labels[i]).collect() }
    }

    pub fn all(&self) -> Batch {
        Batch { x: self.x.clone(), labels: self.labels.clone() }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let b = self.batch(indices);
        Dataset { x: b.x, labels: b.labels, classes: self.classes, image_shape: self.image_shape }
    }

    /// First `n_train` samples and the rest.
    pub fn split(&self, n_train: usize) -> Result<(Dataset, Dataset)> {
        if n_train == 0 || n_train >= self.len() {
            return Err(Error::Config(format!("cannot split {} samples at {n_train}", self.len())));
        }
        let train: Vec<usize> = (0..n_train).collect();
        let test: Vec<usize> = (n_train..self.len()).collect();
        Ok((self.subset(&train), self.subset(&test)))
    }

    /// `label,feature,...` per line, floats in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            write!(out, "{}", self.labels[i]).unwrap();
            for v in self.x.row(i) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }
}

/// Parses CSV text with the label in the first column. Blank lines are
/// skipped; a first line with no numeric fields is taken as a header.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut width = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if line == 1 && fields.iter().all(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if fields.len() < 2 {
            return Err(Error::Parse { line, msg: "need a label and at least one feature".into() });
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|_| Error::Parse { line, msg: format!("label {:?} is not a non-negative integer", fields[0]) })?;
        let features = fields.len() - 1;
        match width {
            None => width = Some(features),
            Some(w) if w != features => {
                return Err(Error::Parse { line, msg: format!("{features} features, expected {w}") });
            }
            _ => {}
        }
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| Error::Parse { line, msg: format!("bad number {f:?}") })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, msg: format!("non-finite value {f:?}") });
            }
            data.push(v);
        }
        labels.push(label);
    }
    let width = width.ok_or_else(|| Error::Input("no data rows".into()))?;
    Dataset::new(Matrix::from_vec(labels.len(), width, data)?, labels)
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    parse_csv(&std::fs::read_to_string(path)?)
}

fn idx_header(bytes: &[u8], magic: u32, what: &str) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(Error::Input(format!("{what}: truncated header")));
    }
    let found = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if found != magic {
        return Err(Error::Input(format!("{what}: magic {found:#010x}, expected {magic:#010x}")));
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Input(format!("{what}: truncated header")));
    }
    let dims: Vec<usize> =
        (0..ndims).map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize).collect();
    let expected = dims.iter().product::<usize>();
    if bytes.len() - header != expected {
        return Err(Error::Input(format!("{what}: {} payload bytes, header says {expected}", bytes.len() - header)));
    }
    Ok((dims, header))
}

/// Unsigned-byte image tensor (`n × h × w`) scaled to `[0, 1]`, one row per
/// image.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Matrix, (usize, usize))> {
    let (dims, header) = idx_header(bytes, IDX_IMAGES, "idx images")?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if n == 0 || h * w == 0 {
        return Err(Error::Input("idx images: empty".into()));
    }
    let data = bytes[header..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((Matrix::from_vec(n, h * w, data)?, (h, w)))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, header) = idx_header(bytes, IDX_LABELS, "idx labels")?;
    Ok(bytes[header..].iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (x, (h, w)) = parse_idx_images(&std::fs::read(images)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels)?)?;
    let mut ds = Dataset::new(x, labels)?;
    ds.image_shape = Some((1, h, w));
    Ok(ds)
}

/// Encodes an image tensor in the IDX unsigned-byte format.
pub fn encode_idx_images(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = IDX_IMAGES.to_be_bytes().to_vec();
    for d in [n, h, w] {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = IDX_LABELS.to_be_bytes().to_vec();
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Two balanced 2-D Gaussian classes with unit variance, centred at
/// `(±separation/2, 0)`, in shuffled order.
pub fn blobs(n: usize, separation: f64, seed: u64) -> Result<Dataset> {
    grid_blobs(n, 1, separation, seed)
}

/// Unit-variance 2-D Gaussian blobs on a `2g × g` grid with spacing
/// `separation`, labelled like a checkerboard; `g = 1` is the plain
/// two-blob problem. Classes are balanced and samples shuffled.
pub fn grid_blobs(n: usize, grid: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config(format!("blobs needs at least 2 samples, got {n}")));
    }
    if grid == 0 {
        return Err(Error::Config("blob grid must be at least 1".into()));
    }
    if !separation.is_finite() {
        return Err(Error::Config(format!("separation {separation}")));
    }
    let mut rng = keyed_rng(seed, 0, 0, Stream::Data);
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);
    let per_class = grid * grid;
    let offset_x = (2 * grid - 1) as f64 / 2.0;
    let offset_y = (grid - 1) as f64 / 2.0;
    let mut data = Vec::with_capacity(2 * n);
    for &y in &labels {
        // Cells of one class: (i, j) with (i + j) % 2 == y.
        let k = rng.random_range(0..per_class);
        let j = k / grid;
        let i = 2 * (k % grid) + (j + y) % 2;
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        data.push((i as f64 - offset_x) * separation + a);
        data.push((j as f64 - offset_y) * separation + b);
    }
    Dataset::new(Matrix::from_vec(n, 2, data)?, labels)
}
