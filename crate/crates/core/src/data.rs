//! Datasets: IDX digit-image files, a synthetic Gaussian-blob generator and
//! seeded train/test subsetting.
//!
//! IDX layout (all integers big-endian): a 32-bit magic number whose low
//! byte is the dimension count and third byte the element type (only
//! `0x08`, unsigned byte, is supported), one 32-bit size per dimension,
//! then the raw payload.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Full,
}

/// Labeled feature rows, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub d_in: usize,
    pub num_classes: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub split: Split,
}

/// Borrowed view of a set of samples, as consumed by the models.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    pub features: &'a [f64],
    pub labels: &'a [usize],
    pub d_in: usize,
}

impl<'a> Samples<'a> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.features[i * self.d_in..(i + 1) * self.d_in]
    }
}

impl Dataset {
    pub fn new(d_in: usize, num_classes: usize, features: Vec<f64>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if d_in == 0 || features.len() != labels.len() * d_in {
            return Err(Error::Shape(format!(
                "{} feature values for {} rows of width {d_in}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::domain(format!("label {l} outside [0, {num_classes})")));
        }
        Ok(Self {
            d_in,
            num_classes,
            features,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn samples(&self) -> Samples<'_> {
        Samples {
            features: &self.features,
            labels: &self.labels,
            d_in: self.d_in,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d_in..(i + 1) * self.d_in]
    }

    /// Copies the given rows, in order, into a new dataset with the same split tag.
    pub fn gather(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.d_in);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            d_in: self.d_in,
            num_classes: self.num_classes,
            features,
            labels,
            split: self.split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<u32>,
}

impl IdxHeader {
    fn payload_len(&self) -> u64 {
        self.dims.iter().map(|&d| u64::from(d)).product()
    }

    fn byte_len(&self) -> u64 {
        4 + 4 * self.dims.len() as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len() as usize);
        out.extend_from_slice(&self.magic.to_be_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            needed: (offset + 4 - bytes.len()) as u64,
        }),
    }
}

/// Parses an unsigned-byte IDX buffer, checking the magic and payload length.
pub fn parse_idx<'a>(bytes: &'a [u8], expected_magic: u32, path: &Path) -> Result<(IdxHeader, &'a [u8])> {
    let magic = read_be_u32(bytes, 0, path)?;
    if magic != expected_magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: expected_magic,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| read_be_u32(bytes, 4 + 4 * i, path))
        .collect::<Result<Vec<_>>>()?;
    let header = IdxHeader { magic, dims };
    let start = header.byte_len();
    let end = start + header.payload_len();
    if (bytes.len() as u64) < end {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            needed: end - bytes.len() as u64,
        });
    }
    Ok((header, &bytes[start as usize..end as usize]))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image/label pair. Pixels are scaled to [0, 1] by 1/255 and
/// each image is flattened row-major.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;
    let (ih, pixels) = parse_idx(&image_bytes, IDX_IMAGES_MAGIC, images_path)?;
    let (lh, raw_labels) = parse_idx(&label_bytes, IDX_LABELS_MAGIC, labels_path)?;
    if lh.dims[0] != ih.dims[0] {
        return Err(Error::CountMismatch {
            path: labels_path.to_path_buf(),
            found: lh.dims[0],
            expected: ih.dims[0],
        });
    }
    let d_in = (ih.dims[1] as usize) * (ih.dims[2] as usize);
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| usize::from(l)).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(d_in, num_classes, features, labels, split)
}

/// Writes a dataset as an IDX image/label pair of `rows × cols` images.
/// Features are mapped back to bytes by `round(255·x)`.
pub fn write_idx(
    data: &Dataset,
    rows: u32,
    cols: u32,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    if (rows as usize) * (cols as usize) != data.d_in {
        return Err(Error::Shape(format!("{rows}x{cols} images do not hold {} features", data.d_in)));
    }
    let n = u32::try_from(data.len()).map_err(|_| Error::domain("too many items for IDX"))?;
    if data.labels.iter().any(|&l| l > 255) {
        return Err(Error::domain("IDX labels must fit in one byte"));
    }
    let mut images = IdxHeader {
        magic: IDX_IMAGES_MAGIC,
        dims: vec![n, rows, cols],
    }
    .to_bytes();
    images.extend(data.features.iter().map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut labels = IdxHeader {
        magic: IDX_LABELS_MAGIC,
        dims: vec![n],
    }
    .to_bytes();
    labels.extend(data.labels.iter().map(|&l| l as u8));

    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, images).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, labels).map_err(|e| Error::io(lp, e))
}

/// `k` isotropic Gaussian clusters in `d_in` dimensions.
///
/// Centers are standard normal draws; each sample is its class center plus
/// `spread` times standard normal noise. Labels cycle `0, 1, …, k−1`, so
/// class counts differ by at most one.
pub fn synthetic_blobs(n: usize, d_in: usize, k: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if k < 2 || n < k {
        return Err(Error::domain(format!("need n >= k >= 2, got n={n}, k={k}")));
    }
    if d_in == 0 {
        return Err(Error::domain("d_in must be positive"));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::domain(format!("spread {spread} must be finite and >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..k * d_in).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut features = Vec::with_capacity(n * d_in);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let center = &centers[class * d_in..(class + 1) * d_in];
        for &c in center {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(c + spread * z);
        }
        labels.push(class);
    }
    Dataset::new(d_in, k, features, labels, Split::Full)
}

/// Seeded shuffle of all rows, then the first `n_train` become the train
/// split and the next `n_test` the test split.
pub fn subset_split(data: &Dataset, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_train + n_test > data.len() {
        return Err(Error::domain(format!(
            "requested {n_train} + {n_test} samples from a dataset of {}",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = data.gather(&order[..n_train]);
    let mut test = data.gather(&order[n_train..n_train + n_test]);
    train.split = Split::Train;
    test.split = Split::Test;
    Ok((train, test))
}
