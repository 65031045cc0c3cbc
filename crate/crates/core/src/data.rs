//! Datasets: seeded gaussian blobs, the CIFAR-10 binary format and IDX files.
//!
//! Pretraining only ever sees an [`Instances`] view, which carries features
//! but no labels; the instance index is the pretraining class.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Mat, SeededRng};

/// Per-channel mean of the CIFAR-10 training set (RGB, pixels in `[0, 1]`).
pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
/// Per-channel standard deviation of the CIFAR-10 training set.
pub const CIFAR10_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Blob centers are drawn uniformly from `[-BLOB_CENTER_RANGE, BLOB_CENTER_RANGE)` per axis.
pub const BLOB_CENTER_RANGE: f64 = 1.0;

/// Channel-major image layout of a flattened row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Mat,
    labels: Option<Vec<usize>>,
    image_shape: Option<ImageShape>,
    pub provenance: String,
}

/// Label-free view handed to pretraining.
#[derive(Debug, Clone, Copy)]
pub struct Instances<'a> {
    pub features: &'a Mat,
    pub image_shape: Option<ImageShape>,
}

impl Instances<'_> {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

impl Dataset {
    pub fn new(features: Mat, labels: Option<Vec<usize>>, provenance: impl Into<String>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::Config(format!(
                    "{} labels for {} instances",
                    l.len(),
                    features.rows()
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            image_shape: None,
            provenance: provenance.into(),
        })
    }

    pub fn with_image_shape(mut self, shape: ImageShape) -> Result<Self> {
        if shape.len() != self.features.cols() {
            return Err(Error::Config(format!(
                "image shape holds {} values but rows have {}",
                shape.len(),
                self.features.cols()
            )));
        }
        self.image_shape = Some(shape);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn image_shape(&self) -> Option<ImageShape> {
        self.image_shape
    }

    pub fn instances(&self) -> Instances<'_> {
        Instances {
            features: &self.features,
            image_shape: self.image_shape,
        }
    }
}

/// Isotropic gaussian clusters. Centers come first from the stream
/// (`BLOB_CENTER_RANGE · (2u − 1)` per axis), then points cluster by
/// cluster as `center + spread · N(0, 1)`. Labels are cluster ids.
pub fn make_blobs(n_clusters: usize, per_cluster: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n_clusters == 0 || per_cluster == 0 || dim == 0 {
        return Err(Error::Config("blob sizes must be positive".into()));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::Config(format!("blob spread {spread} must be >= 0")));
    }
    let mut rng = SeededRng::new(seed);
    let centers: Vec<Vec<f64>> = (0..n_clusters)
        .map(|_| (0..dim).map(|_| BLOB_CENTER_RANGE * rng.symmetric()).collect())
        .collect();
    let n = n_clusters * per_cluster;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_cluster {
            for &m in center {
                data.push(m + spread * rng.normal());
            }
            labels.push(c);
        }
    }
    Dataset::new(
        Mat::new(n, dim, data)?,
        Some(labels),
        format!("blobs(clusters={n_clusters}, per_cluster={per_cluster}, dim={dim}, spread={spread}, seed={seed})"),
    )
}

/// Parameters of a [`make_blobs`] dataset. The default is the desk-scale
/// benchmark: 3 clusters of 100 points in 16 dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub n_clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            n_clusters: 3,
            per_cluster: 100,
            dim: 16,
            spread: 0.4,
            seed: 0,
        }
    }
}

impl BlobSpec {
    pub fn generate(&self) -> Result<Dataset> {
        make_blobs(self.n_clusters, self.per_cluster, self.dim, self.spread, self.seed)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a CIFAR-10 binary batch: records of one label byte followed by
/// 1024 red, 1024 green and 1024 blue bytes. Pixels become
/// `(byte / 255 − mean[c]) / std[c]` with [`CIFAR10_MEAN`] and [`CIFAR10_STD`].
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    parse_cifar10(&bytes).map(|mut d| {
        d.provenance = format!("cifar10:{}", path.display());
        d
    })
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::Format("empty CIFAR-10 file".into()));
    }
    if !bytes.len().is_multiple_of(CIFAR10_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR-10 size {} is not a multiple of {CIFAR10_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR10_RECORD;
    let plane = 32 * 32;
    let mut data = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for (r, record) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(Error::Format(format!("record {r} has label byte {label}")));
        }
        labels.push(label as usize);
        for (i, &px) in record[1..].iter().enumerate() {
            let c = i / plane;
            data.push((px as f64 / 255.0 - CIFAR10_MEAN[c]) / CIFAR10_STD[c]);
        }
    }
    Dataset::new(Mat::new(n, 3 * plane, data)?, Some(labels), "cifar10")?.with_image_shape(ImageShape {
        channels: 3,
        height: 32,
        width: 32,
    })
}

struct IdxHeader {
    dims: Vec<usize>,
    payload_offset: usize,
}

fn parse_idx_header(bytes: &[u8], expected_magic: u32) -> Result<IdxHeader> {
    if bytes.len() < 4 {
        return Err(Error::Format("IDX file shorter than its magic number".into()));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    if magic != expected_magic {
        return Err(Error::Format(format!(
            "IDX magic {magic:#010x}, expected {expected_magic:#010x}"
        )));
    }
    let ndims = (magic & 0xff) as usize;
    let payload_offset = 4 + 4 * ndims;
    if bytes.len() < payload_offset {
        return Err(Error::Format("IDX header truncated".into()));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize)
        .collect();
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("IDX dimensions overflow".into()))?;
    let payload = bytes.len() - payload_offset;
    if payload != expected {
        return Err(Error::Format(format!(
            "IDX dimensions {dims:?} need {expected} bytes, payload has {payload}"
        )));
    }
    Ok(IdxHeader { dims, payload_offset })
}

/// Parses an unsigned-byte IDX image file (magic `0x00000803`, dims
/// `n × rows × cols`, big-endian) into rows scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Dataset> {
    let header = parse_idx_header(bytes, IDX_IMAGES_MAGIC)?;
    let (n, rows, cols) = (header.dims[0], header.dims[1], header.dims[2]);
    let data = bytes[header.payload_offset..]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Dataset::new(Mat::new(n, rows * cols, data)?, None, "idx")?.with_image_shape(ImageShape {
        channels: 1,
        height: rows,
        width: cols,
    })
}

/// Parses an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let header = parse_idx_header(bytes, IDX_LABELS_MAGIC)?;
    Ok(bytes[header.payload_offset..].iter().map(|&b| b as usize).collect())
}

pub fn load_idx(path: &Path) -> Result<Dataset> {
    let mut d = parse_idx_images(&read_file(path)?)?;
    d.provenance = format!("idx:{}", path.display());
    Ok(d)
}

/// Image file plus a matching label file.
pub fn load_idx_with_labels(images: &Path, labels: &Path) -> Result<Dataset> {
    let d = load_idx(images)?;
    let l = parse_idx_labels(&read_file(labels)?)?;
    let shape = d.image_shape;
    let provenance = d.provenance.clone();
    let mut out = Dataset::new(d.features, Some(l), provenance)?;
    out.image_shape = shape;
    Ok(out)
}
