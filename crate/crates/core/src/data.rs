//! Dataset loaders (MNIST IDX, CIFAR-10 binary, `FEDF` feature container),
//! synthetic blobs, validation splitting and client partitioning.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_zoo::NUM_CLASSES;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Samples stacked along the first axis with one label per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, split: Split) -> Result<Self> {
        if samples.shape().len() < 2 || samples.batch() != labels.len() {
            return Err(Error::invalid(format!(
                "{} labels for samples of shape {:?}",
                labels.len(),
                samples.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
            return Err(Error::invalid(format!("label {bad} outside [0, {NUM_CLASSES})")));
        }
        Ok(Self { samples, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    /// Stacked samples and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!(
                "sample index {bad} out of range {}",
                self.len()
            )));
        }
        let x = self.samples.select_rows(indices);
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let (samples, labels) = self.batch(indices)?;
        Ok(Self { samples, labels, split })
    }

    /// Reshapes every sample, e.g. flattening images for a dense model.
    pub fn reshape_samples(self, shape: &[usize]) -> Result<Self> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        Ok(Self {
            samples: self.samples.reshape(&full)?,
            ..self
        })
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parsed IDX file: dimensions and raw unsigned-byte payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Idx {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an unsigned-byte IDX file (type code 0x08).
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<Idx> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(Error::format(path, "bad IDX magic"));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if ndim == 0 || bytes.len() < header {
        return Err(Error::format(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(Error::format(
            path,
            format!("expected {n} payload bytes, found {}", bytes.len() - header),
        ));
    }
    Ok(Idx {
        dims,
        data: bytes[header..].to_vec(),
    })
}

fn idx_images(path: &Path) -> Result<Tensor> {
    let idx = parse_idx(&read(path)?, path)?;
    if idx.dims.len() != 3 {
        return Err(Error::format(
            path,
            format!("image file has {} dims, expected 3", idx.dims.len()),
        ));
    }
    let data = idx.data.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(idx.dims, data)
}

fn idx_labels(path: &Path) -> Result<Vec<usize>> {
    let idx = parse_idx(&read(path)?, path)?;
    if idx.dims.len() != 1 {
        return Err(Error::format(path, "label file must be one-dimensional"));
    }
    check_label_bytes(&idx.data, path)
}

fn check_label_bytes(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    bytes
        .iter()
        .map(|&b| {
            if (b as usize) < NUM_CLASSES {
                Ok(b as usize)
            } else {
                Err(Error::format(path, format!("label {b} outside [0, {NUM_CLASSES})")))
            }
        })
        .collect()
}

fn mnist_split(dir: &Path, prefix: &str, split: Split) -> Result<Dataset> {
    let images_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let images = idx_images(&images_path)?;
    let labels = idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    if images.batch() != labels.len() {
        return Err(Error::format(
            images_path,
            format!("{} images but {} labels", images.batch(), labels.len()),
        ));
    }
    let n = labels.len();
    let per = images.row_len();
    Dataset::new(images.reshape(&[n, per])?, labels, split)
}

/// MNIST train and test sets, pixels in [0, 1], flattened to 784 features.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((
        mnist_split(dir, "train", Split::Train)?,
        mnist_split(dir, "t10k", Split::Test)?,
    ))
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses CIFAR-10 binary records, keeping at most `limit` of them.
pub fn parse_cifar_records(bytes: &[u8], path: &Path, limit: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            path,
            format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for rec in bytes.chunks_exact(CIFAR_RECORD).take(limit) {
        labels.extend(check_label_bytes(&rec[..1], path)?);
        pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok((pixels, labels))
}

fn cifar_files(dir: &Path, files: &[PathBuf], limit: usize, split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let left = limit - labels.len();
        if left == 0 {
            break;
        }
        let path = dir.join(f);
        let (p, l) = parse_cifar_records(&read(&path)?, &path, left)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::format(dir, "no CIFAR-10 records found"));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, split)
}

/// CIFAR-10 train (the five data batches) and test sets, 3x32x32 in [0, 1].
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    load_cifar10_subset(dir, usize::MAX, usize::MAX)
}

/// Like [`load_cifar10`] but keeps only the first records of each split.
pub fn load_cifar10_subset(dir: &Path, train_limit: usize, test_limit: usize) -> Result<(Dataset, Dataset)> {
    let train: Vec<PathBuf> = (1..=5).map(|i| format!("data_batch_{i}.bin").into()).collect();
    Ok((
        cifar_files(dir, &train, train_limit, Split::Train)?,
        cifar_files(dir, &["test_batch.bin".into()], test_limit, Split::Test)?,
    ))
}

const FEDF_MAGIC: &[u8; 4] = b"FEDF";
const FEDF_VERSION: u32 = 1;
const FEDF_HEADER: usize = 4 + 4 * 5;

/// Reads a `FEDF` container: little-endian magic, version, count, three
/// dims, then f32 samples and one label byte per sample.
pub fn load_features(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = read(path)?;
    if bytes.len() < FEDF_HEADER {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..4] != FEDF_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let word = |i: usize| {
        let o = 4 + 4 * i;
        u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
    };
    if word(0) != FEDF_VERSION as usize {
        return Err(Error::format(path, format!("unsupported version {}", word(0))));
    }
    let count = word(1);
    let dims = [word(2), word(3), word(4)];
    let per: usize = dims.iter().product();
    let floats = count * per;
    if count == 0 || per == 0 {
        return Err(Error::format(path, "empty container"));
    }
    if bytes.len() != FEDF_HEADER + 4 * floats + count {
        return Err(Error::format(path, "payload length does not match header"));
    }
    let payload = &bytes[FEDF_HEADER..FEDF_HEADER + 4 * floats];
    let data = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let labels = check_label_bytes(&bytes[FEDF_HEADER + 4 * floats..], path)?;
    Dataset::new(
        Tensor::new(vec![count, dims[0], dims[1], dims[2]], data)?,
        labels,
        split,
    )
}

/// Writes a dataset with three-dimensional samples as a `FEDF` container.
/// Sample values are stored as f32.
pub fn write_features(path: &Path, dataset: &Dataset) -> Result<()> {
    let dims = dataset.sample_shape();
    if dims.len() != 3 {
        return Err(Error::invalid(format!("FEDF needs 3-d samples, got {dims:?}")));
    }
    let mut out = Vec::with_capacity(FEDF_HEADER + 4 * dataset.samples.len() + dataset.len());
    out.extend_from_slice(FEDF_MAGIC);
    for w in [FEDF_VERSION as usize, dataset.len(), dims[0], dims[1], dims[2]] {
        let w = u32::try_from(w).map_err(|_| Error::invalid("FEDF header field exceeds u32"))?;
        out.extend_from_slice(&w.to_le_bytes());
    }
    for &v in dataset.samples.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend(dataset.labels.iter().map(|&y| y as u8));
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Gaussian class blobs: class means drawn from N(0, I), samples at
/// `spread` standard deviation around them. Samples are ordered by class.
pub fn make_synthetic<R: Rng + ?Sized>(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if classes == 0 || classes > NUM_CLASSES || per_class == 0 || dim == 0 {
        return Err(Error::invalid(format!(
            "synthetic task needs 1..={NUM_CLASSES} classes and positive sizes"
        )));
    }
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(mean.iter().map(|m| m + spread * rng.sample::<f64, _>(StandardNormal)));
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![classes * per_class, dim], data)?, labels, Split::Train)
}

/// Holds out `size` samples, allocated to classes in proportion to their
/// frequency (largest remainder). Both parts keep the original order.
pub fn split_validation<R: Rng + ?Sized>(data: &Dataset, size: usize, rng: &mut R) -> Result<(Dataset, Dataset)> {
    if size == 0 || size >= data.len() {
        return Err(Error::invalid(format!(
            "validation size {size} must be in 1..{}",
            data.len()
        )));
    }
    let counts = data.class_counts();
    let n = data.len();
    let mut quota: Vec<usize> = counts.iter().map(|&c| c * size / n).collect();
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    // stable sort keeps ties in class order
    order.sort_by_key(|&c| std::cmp::Reverse((counts[c] * size) % n));
    let short = size - quota.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        quota[c] += 1;
    }
    let mut held = vec![false; n];
    for c in 0..NUM_CLASSES {
        let mut members: Vec<usize> = (0..n).filter(|&i| data.labels[i] == c).collect();
        members.shuffle(rng);
        for &i in &members[..quota[c]] {
            held[i] = true;
        }
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| held[i]);
    Ok((data.subset(&train, data.split)?, data.subset(&val, Split::Validation)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    NonIid,
}

/// Per-client sample indices into one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }
}

/// Splits `data` across `clients`. iid shuffles and deals equal shards, the
/// first `n % clients` shards taking one extra sample; non-iid gives client
/// k every sample of class k.
pub fn partition<R: Rng + ?Sized>(
    data: &Dataset,
    clients: usize,
    mode: PartitionMode,
    rng: &mut R,
) -> Result<Partition> {
    let n = data.len();
    if clients == 0 || clients > n {
        return Err(Error::invalid(format!(
            "cannot split {n} samples across {clients} clients"
        )));
    }
    let shards = match mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            let (base, extra) = (n / clients, n % clients);
            let mut shards = Vec::with_capacity(clients);
            let mut start = 0;
            for k in 0..clients {
                let len = base + usize::from(k < extra);
                let mut shard = idx[start..start + len].to_vec();
                shard.sort_unstable();
                shards.push(shard);
                start += len;
            }
            shards
        }
        PartitionMode::NonIid => {
            if clients != NUM_CLASSES {
                return Err(Error::config(
                    "clients",
                    format!("non-iid partitioning needs exactly {NUM_CLASSES} clients, got {clients}"),
                ));
            }
            let mut shards = vec![Vec::new(); clients];
            for (i, &y) in data.labels.iter().enumerate() {
                shards[y].push(i);
            }
            shards
        }
    };
    Ok(Partition { shards })
}

#[cfg(test)]
mod tests;
