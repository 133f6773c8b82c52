//! Synthetic benchmarks, CSV ingestion, augmentation and batch construction.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    Full,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Full => "full",
        })
    }
}

/// Synthetic benchmark family. All kinds share the sinusoidal feature lift
/// and differ in their default label map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Identity labels, uniform on `[0, 1)`.
    Ring,
    /// Monotone cubic labels.
    Poly,
    /// Heavy-tailed labels `−ln(1 − 0.99·t)`.
    Skewed,
}

impl DatasetKind {
    pub fn default_label_map(self) -> LabelMap {
        match self {
            DatasetKind::Ring => LabelMap::Identity,
            DatasetKind::Poly => LabelMap::Cubic,
            DatasetKind::Skewed => LabelMap::NegLog,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Ring => "ring",
            DatasetKind::Poly => "poly",
            DatasetKind::Skewed => "skewed",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ring" => Ok(DatasetKind::Ring),
            "poly" => Ok(DatasetKind::Poly),
            "skewed" => Ok(DatasetKind::Skewed),
            other => Err(Error::InvalidParameter(format!("unknown dataset kind '{other}'"))),
        }
    }
}

/// Latent-to-label map `y = g(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMap {
    Identity,
    /// `t³ + t/2`
    Cubic,
    /// `−ln(1 − 0.99·t)`
    NegLog,
}

impl LabelMap {
    pub fn apply(self, t: f64) -> f64 {
        match self {
            LabelMap::Identity => t,
            LabelMap::Cubic => t * t * t + 0.5 * t,
            LabelMap::NegLog => -(1.0 - 0.99 * t).ln(),
        }
    }
}

impl fmt::Display for LabelMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelMap::Identity => "identity",
            LabelMap::Cubic => "cubic",
            LabelMap::NegLog => "neglog",
        })
    }
}

impl FromStr for LabelMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "identity" => Ok(LabelMap::Identity),
            "cubic" => Ok(LabelMap::Cubic),
            "neglog" => Ok(LabelMap::NegLog),
            other => Err(Error::InvalidParameter(format!("unknown label map '{other}'"))),
        }
    }
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub dim: usize,
    pub noise: f64,
    pub label_map: LabelMap,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn new(kind: DatasetKind, n: usize, dim: usize, noise: f64, seed: u64) -> Self {
        Self {
            kind,
            n,
            dim,
            noise,
            label_map: kind.default_label_map(),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("n must be ≥ 1".into()));
        }
        if self.dim < 2 {
            return Err(Error::InvalidParameter("feature dim must be ≥ 2".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise must be ≥ 0, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> Vec<(String, String)> {
        vec![
            ("kind".into(), self.kind.to_string()),
            ("n".into(), self.n.to_string()),
            ("dim".into(), self.dim.to_string()),
            ("noise".into(), self.noise.to_string()),
            ("label_map".into(), self.label_map.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

/// Features and labels aligned by row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<f64>,
    pub split: Split,
    pub generator: Option<GeneratorSpec>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<f64>, split: Split) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows, {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::InvalidParameter("dataset needs at least one sample".into()));
        }
        if features.iter().chain(&labels).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset entry".into()));
        }
        Ok(Self {
            features,
            labels,
            split,
            generator: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn select(&self, indices: &[usize], split: Split) -> Self {
        Self {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split,
            generator: self.generator.clone(),
        }
    }

    pub fn mean_label(&self) -> f64 {
        self.labels.iter().sum::<f64>() / self.len() as f64
    }
}

/// Noiseless feature vector for latent `t ∈ [0, 1]`.
///
/// Coordinate pairs `(cos πkt, sin πkt)` for `k = 1, 2, …`, scaled so the
/// full vector has unit norm when `dim` is even. The `k = 1` pair traces a
/// half circle, which keeps the lift injective.
pub fn lift(t: f64, dim: usize) -> Vec<f64> {
    let scale = 1.0 / ((dim as f64) / 2.0).sqrt();
    (0..dim)
        .map(|j| {
            let k = (j / 2 + 1) as f64;
            let angle = std::f64::consts::PI * k * t;
            scale * if j % 2 == 0 { angle.cos() } else { angle.sin() }
        })
        .collect()
}

/// Builds a dataset from explicit latents; noise is drawn from `rng`.
pub fn dataset_from_latents<R: Rng + ?Sized>(
    latents: &[f64],
    dim: usize,
    noise: f64,
    label_map: LabelMap,
    rng: &mut R,
) -> Result<Dataset> {
    let n = latents.len();
    let mut features = Array2::zeros((n, dim));
    let normal = if noise > 0.0 {
        Some(Normal::new(0.0, noise).map_err(|e| Error::InvalidParameter(e.to_string()))?)
    } else {
        None
    };
    for (i, &t) in latents.iter().enumerate() {
        for (j, v) in lift(t, dim).into_iter().enumerate() {
            features[[i, j]] = v + normal.map_or(0.0, |d| d.sample(rng));
        }
    }
    let labels = latents.iter().map(|&t| label_map.apply(t)).collect();
    Dataset::new(features, labels, Split::Full)
}

/// Latent `t ~ U(0,1)`, label `g(t)`, features `lift(t) + N(0, σ²)`.
pub fn generate_dataset(spec: &GeneratorSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let latents: Vec<f64> = (0..spec.n).map(|_| rng.random::<f64>()).collect();
    let mut ds = dataset_from_latents(&latents, spec.dim, spec.noise, spec.label_map, &mut rng)?;
    ds.generator = Some(spec.clone());
    Ok(ds)
}

/// Label-preserving augmentation: additive Gaussian noise on every feature.
pub fn augment<R: Rng + ?Sized>(row: ArrayView1<'_, f64>, sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma <= 0.0 {
        return row.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    row.iter().map(|&v| v + normal.sample(rng)).collect()
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// 70/15/15 split by shuffled row index.
pub fn split_dataset(ds: &Dataset, seed: u64) -> Splits {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ds.len();
    let n_train = (n * 70) / 100;
    let n_val = (n * 15) / 100;
    Splits {
        train: ds.select(&idx[..n_train], Split::Train),
        val: ds.select(&idx[n_train..n_train + n_val], Split::Val),
        test: ds.select(&idx[n_train + n_val..], Split::Test),
    }
}

/// Batch-augmentation plan: `base_batch` sources, each replicated `multiple`
/// times, for an effective batch of `base_batch · multiple` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub base_batch: usize,
    pub multiple: usize,
}

impl BatchPlan {
    pub fn new(base_batch: usize, multiple: usize) -> Result<Self> {
        if base_batch == 0 || multiple == 0 {
            return Err(Error::InvalidParameter(
                "batch size and augmentation multiple must be ≥ 1".into(),
            ));
        }
        Ok(Self {
            base_batch,
            multiple,
        })
    }

    pub fn effective_size(&self) -> usize {
        self.base_batch * self.multiple
    }

    /// Batches per pass over `n` samples, counting a final partial batch only
    /// if it has at least two sources.
    pub fn batches_per_epoch(&self, n: usize) -> usize {
        let full = n / self.base_batch;
        full + usize::from(n % self.base_batch >= 2)
    }
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self {
            base_batch: 8,
            multiple: 8,
        }
    }
}

/// One augmented batch. Rows are grouped by source: the `multiple` replicas
/// of a source are adjacent.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<f64>,
    pub source_ids: Vec<usize>,
}

/// One epoch of augmented batches, fully determined by `epoch_seed`.
pub struct BatchIter<'a> {
    data: &'a Dataset,
    plan: BatchPlan,
    sigma_aug: f64,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchIter<'a> {
    pub fn new(data: &'a Dataset, plan: BatchPlan, sigma_aug: f64, epoch_seed: u64) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::DatasetTooSmall(data.len()));
        }
        if !(sigma_aug >= 0.0 && sigma_aug.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma_aug must be ≥ 0, got {sigma_aug}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            data,
            plan,
            sigma_aug,
            order,
            cursor: 0,
            rng,
        })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let end = (self.cursor + self.plan.base_batch).min(self.order.len());
        if end - self.cursor < 2 {
            self.cursor = self.order.len();
            return None;
        }
        let sources = &self.order[self.cursor..end];
        self.cursor = end;

        let m = self.plan.multiple;
        let rows = sources.len() * m;
        let mut inputs = Array2::zeros((rows, self.data.dim()));
        let mut labels = Vec::with_capacity(rows);
        let mut source_ids = Vec::with_capacity(rows);
        for (s, &src) in sources.iter().enumerate() {
            let base = self.data.features.row(src);
            for r in 0..m {
                let row = augment(base, self.sigma_aug, &mut self.rng);
                inputs
                    .row_mut(s * m + r)
                    .iter_mut()
                    .zip(row)
                    .for_each(|(dst, v)| *dst = v);
                labels.push(self.data.labels[src]);
                source_ids.push(src);
            }
        }
        Some(Batch {
            inputs,
            labels,
            source_ids,
        })
    }
}

/// Seed for epoch `epoch` of a run seeded with `run_seed`.
pub fn epoch_seed(run_seed: u64, epoch: u64) -> u64 {
    run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        ^ 0x94D0_49BB_1331_11EB
}

/// Reads `f0,…,f{D−1},label` CSV with one header row.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(format!("{other:?}")),
        })?;

    let header = reader
        .headers()
        .map_err(|e| parse_err(format!("header: {e}")))?
        .clone();
    let cols = header.len();
    if cols < 2 {
        return Err(parse_err("need at least one feature column and a label column".into()));
    }
    for (j, name) in header.iter().enumerate() {
        let expected = if j + 1 == cols {
            "label".to_string()
        } else {
            format!("f{j}")
        };
        if name.trim() != expected {
            return Err(parse_err(format!(
                "header column {j} is '{name}', expected '{expected}'"
            )));
        }
    }
    let d = cols - 1;

    let mut flat = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(format!("row {row}: {e}")))?;
        if record.len() != cols {
            return Err(parse_err(format!(
                "row {row}: {} fields, expected {cols}",
                record.len()
            )));
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("row {row}, column {j}: '{field}' is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("row {row}, column {j}: non-finite value")));
            }
            if j < d {
                flat.push(v);
            } else {
                labels.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(parse_err("no data rows".into()));
    }
    let features = Array2::from_shape_vec((labels.len(), d), flat).expect("rows checked");
    Dataset::new(features, labels, Split::Full)
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_write_err(path, e))?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_write_err(path, e))?;
    for (row, &y) in ds.features.rows().into_iter().zip(&ds.labels) {
        let mut rec: Vec<String> = row.iter().map(f64::to_string).collect();
        rec.push(y.to_string());
        w.write_record(&rec).map_err(|e| csv_write_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_write_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

/// `data.csv` → `data.meta`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta")
}

/// Writes a `key=value` file, one pair per line.
pub fn write_key_values(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let body: String = pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    message: format!("line {}: expected key=value", i + 1),
                })
        })
        .collect()
}

pub fn read_key_values(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_key_values(&text, path)
}
