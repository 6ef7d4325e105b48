//! Tabular and image dataset ingestion, splitting and standardization.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::{mean, std_dev, Matrix};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("non-numeric cell {value:?} at row {row}, column {col}")]
    NonNumeric { row: usize, col: usize, value: String },
    #[error("row {row} has {found} cells, expected {expected}")]
    Ragged { row: usize, found: usize, expected: usize },
    #[error("target column {0} not found")]
    MissingTarget(String),
    #[error("dataset has no rows")]
    Empty,
    #[error("bad IDX magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX {what} file")]
    Truncated { what: &'static str },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid image dataset: {0}")]
    InvalidImages(String),
    #[error("cannot split {0} rows into three non-empty parts")]
    TooSmall(usize),
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions((f64, f64, f64)),
    #[error("split files are not a partition of 0..{n}: {reason}")]
    BadPartition { n: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Which column of a delimited file holds the regression target.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetColumn {
    Index(usize),
    Last,
    Name(String),
}

impl std::str::FromStr for TargetColumn {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "last" => TargetColumn::Last,
            _ => match s.parse::<usize>() {
                Ok(i) => TargetColumn::Index(i),
                Err(_) => TargetColumn::Name(s.to_string()),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub name: String,
    pub features: Matrix,
    pub labels: Vec<f64>,
}

impl TabularDataset {
    pub fn new(name: impl Into<String>, features: Matrix, labels: Vec<f64>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(DatasetError::Ragged {
                row: labels.len(),
                found: features.rows(),
                expected: labels.len(),
            });
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> TabularDataset {
        TabularDataset {
            name: self.name.clone(),
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Loads a comma-separated numeric table. A first row containing any
/// non-numeric cell is treated as a header.
pub fn load_tabular(path: impl AsRef<Path>, target: &TargetColumn) -> Result<TabularDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let mut header: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 1;
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        if i == 0 && record.iter().any(|c| c.parse::<f64>().is_err()) {
            header = Some(record.iter().map(str::to_string).collect());
            continue;
        }
        let mut row = Vec::with_capacity(record.len());
        for (col, cell) in record.iter().enumerate() {
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(DatasetError::NonNumeric {
                        row: line,
                        col: col + 1,
                        value: cell.to_string(),
                    })
                }
            }
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(DatasetError::Ragged {
                    row: line,
                    found: row.len(),
                    expected: first.len(),
                });
            }
        }
        rows.push(row);
    }
    let width = match (&header, rows.first()) {
        (_, Some(r)) => r.len(),
        _ => return Err(DatasetError::Empty),
    };
    if let Some(h) = &header {
        if h.len() != width {
            return Err(DatasetError::Ragged {
                row: 1,
                found: h.len(),
                expected: width,
            });
        }
    }
    let target_idx = match target {
        TargetColumn::Last => width - 1,
        TargetColumn::Index(i) if *i < width => *i,
        TargetColumn::Index(i) => return Err(DatasetError::MissingTarget(i.to_string())),
        TargetColumn::Name(name) => header
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| DatasetError::MissingTarget(name.clone()))?,
    };
    if width < 2 {
        return Err(DatasetError::MissingTarget("no feature columns".into()));
    }
    let labels: Vec<f64> = rows.iter().map(|r| r[target_idx]).collect();
    let mut data = Vec::with_capacity(rows.len() * (width - 1));
    for r in &rows {
        data.extend(r.iter().enumerate().filter(|(c, _)| *c != target_idx).map(|(_, v)| *v));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let features = Matrix::new(rows.len(), width - 1, data).expect("finite by construction");
    TabularDataset::new(name, features, labels)
}

/// One image, channel-major (`c`, then row, then column), values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), channels * height * width, "pixel buffer size");
        Self {
            channels,
            height,
            width,
            pixels,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    #[inline]
    pub fn at(&self, c: usize, r: usize, col: usize) -> f32 {
        self.pixels[(c * self.height + r) * self.width + col]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, r: usize, col: usize) -> &mut f32 {
        &mut self.pixels[(c * self.height + r) * self.width + col]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ImageDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(DatasetError::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| !im.same_shape(first)) {
                return Err(DatasetError::InvalidImages("images differ in shape".into()));
            }
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DatasetError::InvalidImages(format!(
                "label {l} outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` of the images, if any.
    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|i| (i.channels, i.height, i.width))
    }

    pub fn subset(&self, idx: &[usize]) -> ImageDataset {
        ImageDataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(io_err(path))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(io_err(path))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DatasetError::Truncated { what })
}

/// Loads an IDX image/label pair (plain or gzip-compressed). Pixels are
/// scaled to `[0, 1]` by dividing by 255; the class count is `max label + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<ImageDataset> {
    let img = read_maybe_gz(images_path.as_ref())?;
    let lab = read_maybe_gz(labels_path.as_ref())?;

    let magic = be_u32(&img, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DatasetError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&img, 4, "images")? as usize;
    let rows = be_u32(&img, 8, "images")? as usize;
    let cols = be_u32(&img, 12, "images")? as usize;
    let px = rows * cols;
    if img.len() < 16 + n * px {
        return Err(DatasetError::Truncated { what: "images" });
    }

    let magic = be_u32(&lab, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DatasetError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n_labels = be_u32(&lab, 4, "labels")? as usize;
    if lab.len() < 8 + n_labels {
        return Err(DatasetError::Truncated { what: "labels" });
    }
    if n_labels != n {
        return Err(DatasetError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }

    let images = (0..n)
        .map(|i| {
            let bytes = &img[16 + i * px..16 + (i + 1) * px];
            Image::new(1, rows, cols, bytes.iter().map(|&b| b as f32 / 255.0).collect())
        })
        .collect();
    let labels: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    ImageDataset::new(images, labels, num_classes)
}

/// Writes single-channel images as an uncompressed IDX file (pixels rounded to bytes).
pub fn write_idx_images(path: impl AsRef<Path>, images: &[Image]) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = images.first().map_or((0, 0), |i| (i.height, i.width));
    let mut buf = Vec::with_capacity(16 + images.len() * h * w);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, h as u32, w as u32] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    for im in images {
        if im.channels != 1 || im.height != h || im.width != w {
            return Err(DatasetError::InvalidImages(
                "IDX images must be single-channel and equally sized".into(),
            ));
        }
        buf.extend(im.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(io_err(path))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l)
            .map_err(|_| DatasetError::InvalidImages(format!("label {l} does not fit a byte")))?;
        buf.push(b);
    }
    File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(io_err(path))
}

/// Train/validation/test partition of `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Shuffled partition of `0..n`. Train and validation sizes are
/// `floor(n·fraction)` (at least one each); the test split takes the remainder
/// and is never empty.
pub fn make_splits(n: usize, seed: u64, fractions: (f64, f64, f64)) -> Result<SplitSpec> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadFractions(fractions));
    }
    if n < 3 {
        return Err(DatasetError::TooSmall(n));
    }
    let floor = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
    let n_val = floor(fv).max(1);
    // Train gives up rows if rounding left nothing for test.
    let n_train = floor(ft).max(1).min(n - n_val - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(SplitSpec {
        train: idx,
        val,
        test,
        seed,
    })
}

fn read_index_file(path: &Path) -> Result<Vec<usize>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse::<usize>().map_err(|_| DatasetError::NonNumeric {
            row: i + 1,
            col: 1,
            value: t.to_string(),
        })?);
    }
    Ok(out)
}

/// Reads an externally supplied split (one index per line, three files) and
/// checks it partitions `0..n`.
pub fn read_split_files(
    n: usize,
    train: impl AsRef<Path>,
    val: impl AsRef<Path>,
    test: impl AsRef<Path>,
) -> Result<SplitSpec> {
    let spec = SplitSpec {
        train: read_index_file(train.as_ref())?,
        val: read_index_file(val.as_ref())?,
        test: read_index_file(test.as_ref())?,
        seed: 0,
    };
    let mut seen = vec![false; n];
    for &i in spec.train.iter().chain(&spec.val).chain(&spec.test) {
        if i >= n {
            return Err(DatasetError::BadPartition {
                n,
                reason: format!("index {i} out of range"),
            });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(DatasetError::BadPartition {
                n,
                reason: format!("index {i} repeated"),
            });
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(DatasetError::BadPartition {
            n,
            reason: format!("index {missing} missing"),
        });
    }
    Ok(spec)
}

/// Per-feature affine scaling fitted on training rows, plus the training label
/// mean and standard deviation `s_y` used to express widths.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub label_mean: f64,
    pub label_std: f64,
}

impl Standardizer {
    /// Fits on training rows; constant columns keep σ = 1.
    pub fn fit(train: &TabularDataset) -> Standardizer {
        let d = train.dim();
        let mut feature_means = Vec::with_capacity(d);
        let mut feature_stds = Vec::with_capacity(d);
        for c in 0..d {
            let col = train.features.column(c);
            feature_means.push(mean(&col));
            let s = std_dev(&col);
            feature_stds.push(if s > 0.0 && s.is_finite() { s } else { 1.0 });
        }
        let s_y = std_dev(&train.labels);
        Standardizer {
            feature_means,
            feature_stds,
            label_mean: mean(&train.labels),
            label_std: if s_y > 0.0 { s_y } else { 1.0 },
        }
    }

    /// Scales features; labels stay in original units.
    pub fn apply(&self, data: &TabularDataset) -> TabularDataset {
        let mut features = data.features.clone();
        for r in 0..features.rows() {
            for (c, v) in features.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.feature_means[c]) / self.feature_stds[c];
            }
        }
        TabularDataset {
            name: data.name.clone(),
            features,
            labels: data.labels.clone(),
        }
    }

    pub fn scale_label(&self, y: f64) -> f64 {
        (y - self.label_mean) / self.label_std
    }

    pub fn unscale_label(&self, z: f64) -> f64 {
        z * self.label_std + self.label_mean
    }
}

pub fn fit_standardizer(train: &TabularDataset) -> Standardizer {
    Standardizer::fit(train)
}
