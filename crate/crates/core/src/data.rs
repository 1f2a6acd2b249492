//! Datasets: MNIST IDX files and seeded synthetic generators.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifact::{Artifact, ArtifactKind};
use crate::error::{argument, shape, Error, Result};
use crate::output::NO_TARGET;
use crate::rng::{self, tag};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Feature rows with one class label each.
    Classification { classes: usize },
    /// Token rows with one next-token target per position.
    Sequence { vocab: usize },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    kind: DatasetKind,
    rows: usize,
    cols: usize,
    /// `null` marks an unlabelled position.
    targets: Vec<Option<usize>>,
}

/// A set of samples. Sequence inputs hold token ids stored as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub inputs: Tensor2,
    /// One entry per output row: `n` for classification, `n · len` for
    /// sequences. Unlabelled positions hold [`NO_TARGET`].
    pub targets: Vec<usize>,
}

impl Dataset {
    pub fn new(kind: DatasetKind, inputs: Tensor2, targets: Vec<usize>) -> Result<Self> {
        let ds = Self {
            kind,
            inputs,
            targets,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.inputs.rows() == 0 {
            return Err(argument("dataset is empty"));
        }
        if self.targets.len() != self.inputs.rows() * self.rows_per_sample() {
            return Err(shape(format!(
                "{} targets for {} samples",
                self.targets.len(),
                self.inputs.rows()
            )));
        }
        let (limit, what) = match self.kind {
            DatasetKind::Classification { classes } => (classes, "label"),
            DatasetKind::Sequence { vocab } => {
                if let Some(t) = self
                    .inputs
                    .data()
                    .iter()
                    .find(|&&t| t < 0.0 || t >= vocab as f64 || t.fract() != 0.0)
                {
                    return Err(argument(format!("token {t} outside vocabulary {vocab}")));
                }
                (vocab, "target")
            }
        };
        if let Some(y) = self.targets.iter().find(|&&y| y != NO_TARGET && y >= limit) {
            return Err(argument(format!("{what} {y} outside 0..{limit}")));
        }
        Ok(())
    }

    pub fn to_artifact(&self, config_digest: &str) -> Result<Artifact> {
        let header = DatasetHeader {
            kind: self.kind,
            rows: self.inputs.rows(),
            cols: self.inputs.cols(),
            targets: self.targets.iter().map(|&t| (t != NO_TARGET).then_some(t)).collect(),
        };
        Artifact::new(ArtifactKind::Dataset, config_digest, header, self.inputs.data().to_vec())
    }

    pub fn from_artifact(a: &Artifact) -> Result<Self> {
        a.expect_kind(ArtifactKind::Dataset)?;
        let h: DatasetHeader = a.meta()?;
        let inputs = Tensor2::new(h.rows, h.cols, a.payload.clone())?;
        let targets = h.targets.into_iter().map(|t| t.unwrap_or(NO_TARGET)).collect();
        Self::new(h.kind, inputs, targets)
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    /// Model output rows per sample.
    pub fn rows_per_sample(&self) -> usize {
        match self.kind {
            DatasetKind::Classification { .. } => 1,
            DatasetKind::Sequence { .. } => self.inputs.cols(),
        }
    }

    /// Number of classes or vocabulary size.
    pub fn num_outputs(&self) -> usize {
        match self.kind {
            DatasetKind::Classification { classes } => classes,
            DatasetKind::Sequence { vocab } => vocab,
        }
    }

    /// Targets of samples `start..end`.
    pub fn targets_of(&self, start: usize, end: usize) -> &[usize] {
        let r = self.rows_per_sample();
        &self.targets[start * r..end * r]
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(argument(format!("index {i} outside dataset of {}", self.len())));
        }
        let r = self.rows_per_sample();
        let targets = indices
            .iter()
            .flat_map(|&i| self.targets[i * r..(i + 1) * r].iter().copied())
            .collect();
        Ok(Dataset {
            kind: self.kind,
            inputs: self.inputs.select_rows(indices),
            targets,
        })
    }

    /// The first `n` samples.
    pub fn prefix(&self, n: usize) -> Result<Dataset> {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Content hash over kind, shape, inputs and targets.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.kind).expect("kind serializes"));
        h.update((self.inputs.rows() as u64).to_le_bytes());
        h.update((self.inputs.cols() as u64).to_le_bytes());
        for v in self.inputs.data() {
            h.update(v.to_le_bytes());
        }
        for &t in &self.targets {
            h.update((t as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

struct IdxReader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).context(format!("reading {path:?}")))?;
        Ok(Self { path, bytes, pos: 0 })
    }

    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let b = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.fail(self.pos, "truncated header"))?;
        let v = u32::from_be_bytes(b.try_into().expect("4 bytes"));
        self.pos = end;
        Ok(v)
    }

    fn header(&mut self, magic: u32, ndim: usize) -> Result<Vec<usize>> {
        let found = self.u32()?;
        if found != magic {
            return Err(self.fail(0, format!("magic {found:#010x}, expected {magic:#010x}")));
        }
        (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect()
    }

    fn body(&self, len: usize) -> Result<&[u8]> {
        self.bytes.get(self.pos..self.pos + len).ok_or_else(|| {
            self.fail(
                self.bytes.len(),
                format!("truncated payload: need {len} bytes after offset {}", self.pos),
            )
        })
    }
}

/// Parse an MNIST image/label IDX pair; pixels are scaled to `[0, 1]`.
/// `limit` keeps the first samples in file order.
pub fn load_mnist_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let mut img = IdxReader::open(images)?;
    let dims = img.header(IDX_IMAGES, 3)?;
    let (count, h, w) = (dims[0], dims[1], dims[2]);
    let mut lab = IdxReader::open(labels)?;
    let label_count = lab.header(IDX_LABELS, 1)?[0];
    if label_count != count {
        return Err(lab.fail(4, format!("{label_count} labels for {count} images")));
    }
    let n = limit.map_or(count, |l| l.min(count));
    let pixels = h * w;
    let raw = img.body(count * pixels)?;
    let raw_labels = lab.body(count)?;
    let inputs = Tensor2::new(
        n,
        pixels,
        raw[..n * pixels].iter().map(|&b| f64::from(b) / 255.0).collect(),
    )?;
    let targets: Vec<usize> = raw_labels[..n].iter().map(|&b| usize::from(b)).collect();
    if let Some(pos) = targets.iter().position(|&y| y >= 10) {
        return Err(lab.fail(8 + pos, format!("label {} outside 0..10", targets[pos])));
    }
    Dataset::new(DatasetKind::Classification { classes: 10 }, inputs, targets)
}

/// Write an IDX image/label pair (rows of `h·w` bytes).
pub fn write_mnist_idx(images: &Path, labels: &Path, pixels: &[Vec<u8>], h: usize, w: usize, ys: &[u8]) -> Result<()> {
    let mut img = Vec::with_capacity(16 + pixels.len() * h * w);
    img.extend(IDX_IMAGES.to_be_bytes());
    for d in [pixels.len(), h, w] {
        img.extend((d as u32).to_be_bytes());
    }
    for p in pixels {
        if p.len() != h * w {
            return Err(shape("image row has the wrong pixel count"));
        }
        img.extend(p);
    }
    let mut lab = Vec::with_capacity(8 + ys.len());
    lab.extend(IDX_LABELS.to_be_bytes());
    lab.extend((ys.len() as u32).to_be_bytes());
    lab.extend(ys);
    std::fs::write(images, img)?;
    std::fs::write(labels, lab)?;
    Ok(())
}

/// Gaussian blobs with unit covariance around seeded class centers.
///
/// Centers are random orthonormal directions (random unit directions when
/// `classes > dim`) scaled by `separation`. Labels are uniform; with
/// probability `label_noise` a label is replaced by a different class.
pub fn gen_synthetic_classification(
    n: usize,
    dim: usize,
    classes: usize,
    separation: f64,
    label_noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || dim == 0 || classes < 2 {
        return Err(argument("need n ≥ 1, dim ≥ 1 and at least two classes"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(argument(format!("separation {separation} must be finite and ≥ 0")));
    }
    if !(0.0..1.0).contains(&label_noise) {
        return Err(argument(format!("label noise {label_noise} outside [0, 1)")));
    }
    let centers = class_centers(dim, classes, separation, seed);
    let mut rng = rng::stream(seed, &[tag::DATA, 1]);
    let mut inputs = Tensor2::zeros(n, dim);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let y = rng.random_range(0..classes);
        for (x, c) in inputs.row_mut(i).iter_mut().zip(&centers[y]) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = c + z;
        }
        let flip = rng.random::<f64>() < label_noise;
        let other = (y + rng.random_range(1..classes)) % classes;
        targets.push(if flip { other } else { y });
    }
    Dataset::new(DatasetKind::Classification { classes }, inputs, targets)
}

fn class_centers(dim: usize, classes: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, &[tag::DATA, 0]);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for k in 0..classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if k < dim {
            for u in &out {
                let p = crate::tensor::dot(u, &v);
                crate::tensor::axpy(-p, u, &mut v);
            }
        }
        let norm = crate::tensor::norm(&v).max(f64::MIN_POSITIVE);
        v.iter_mut().for_each(|x| *x /= norm);
        out.push(v);
    }
    out.iter_mut()
        .for_each(|v| v.iter_mut().for_each(|x| *x *= separation));
    out
}

/// How synthetic token sequences are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceGenerator {
    /// Order-k Markov chain whose transition rows are drawn from `seed`.
    Markov { order: usize, seed: u64 },
    /// Uniform tokens; the target at position t is the input token t − 1.
    Copy,
}

/// Dirichlet concentration of each Markov transition row. Below 1 the rows
/// are peaked, which keeps the task learnable at desk scale.
pub const MARKOV_CONCENTRATION: f64 = 0.5;

/// Transition rows of an order-`order` chain, indexed by the previous
/// `order` tokens read as a base-`vocab` number (oldest first).
pub fn markov_transitions(vocab: usize, order: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if vocab < 2 || order == 0 {
        return Err(argument("Markov chain needs vocab ≥ 2 and order ≥ 1"));
    }
    let states = vocab
        .checked_pow(order as u32)
        .filter(|&s| s <= 1 << 20)
        .ok_or_else(|| argument("Markov state space too large"))?;
    let gamma = Gamma::new(MARKOV_CONCENTRATION, 1.0).map_err(|e| argument(e.to_string()))?;
    let mut rng = rng::stream(seed, &[tag::DATA, 2]);
    Ok((0..states)
        .map(|_| {
            let g: Vec<f64> = (0..vocab).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
            let s: f64 = g.iter().sum();
            g.into_iter().map(|v| v / s).collect()
        })
        .collect())
}

fn sample_categorical(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// `n` sequences of `context_len` tokens with aligned next-token targets.
pub fn gen_synthetic_sequences(
    n: usize,
    vocab: usize,
    context_len: usize,
    generator: SequenceGenerator,
    seed: u64,
) -> Result<Dataset> {
    if vocab < 2 || n == 0 || context_len == 0 {
        return Err(argument("need vocab ≥ 2, n ≥ 1 and context_len ≥ 1"));
    }
    let mut rng = rng::stream(seed, &[tag::DATA, 3]);
    let mut inputs = Tensor2::zeros(n, context_len);
    let mut targets = Vec::with_capacity(n * context_len);
    match generator {
        SequenceGenerator::Copy => {
            for i in 0..n {
                let row: Vec<usize> = (0..context_len).map(|_| rng.random_range(0..vocab)).collect();
                for (t, &tok) in row.iter().enumerate() {
                    inputs.set(i, t, tok as f64);
                    targets.push(if t == 0 { NO_TARGET } else { row[t - 1] });
                }
            }
        }
        SequenceGenerator::Markov { order, seed: chain } => {
            let table = markov_transitions(vocab, order, chain)?;
            for i in 0..n {
                let mut toks: Vec<usize> = (0..order).map(|_| rng.random_range(0..vocab)).collect();
                while toks.len() < context_len + 1 {
                    let state = toks[toks.len() - order..]
                        .iter()
                        .fold(0, |s, &t| s * vocab + t);
                    toks.push(sample_categorical(&table[state], rng.random()));
                }
                let start = toks.len() - context_len - 1;
                for t in 0..context_len {
                    inputs.set(i, t, toks[start + t] as f64);
                    // Positions whose history starts before the sequence
                    // are still predictable from the tokens that exist.
                    targets.push(toks[start + t + 1]);
                }
            }
        }
    }
    Dataset::new(DatasetKind::Sequence { vocab }, inputs, targets)
}
