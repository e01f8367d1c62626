//! Dataset ingestion, label partitioning, and synthetic classification data.
//!
//! The partitioner implements the maximal-heterogeneity special case: one
//! class per worker, shards trimmed to equal size. [`read_idx`] /
//! [`write_idx`] handle the big-endian IDX tensor format used by the
//! classic MNIST distribution.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::rng::{StreamRng, PURPOSE_DATA};
use crate::timing::WorkerId;
use crate::{Error, Result};

/// A dense classification dataset: `N x dim` features, labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} feature values for {} rows of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l >= classes) {
            return Err(Error::Config("label out of range".into()));
        }
        Ok(Self {
            features,
            dim,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Normalize all feature entries by the dataset's scalar mean and
    /// standard deviation. Returns `(mean, std)`.
    pub fn normalize(&mut self) -> (f64, f64) {
        let n = self.features.len() as f64;
        let mean = self.features.iter().sum::<f64>() / n;
        let var = self.features.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-12);
        for v in &mut self.features {
            *v = (*v - mean) / std;
        }
        (mean, std)
    }
}

/// A worker's slice of a dataset, stored as row indices.
#[derive(Clone, Debug)]
pub struct Shard {
    pub owner: WorkerId,
    pub dataset: Arc<LabeledDataset>,
    pub rows: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.dataset.row(self.rows[i])
    }

    pub fn label(&self, i: usize) -> usize {
        self.dataset.labels[self.rows[i]]
    }
}

/// Partition a dataset by label: shard `i` holds only rows of class `i`.
/// Requires exactly `n` distinct classes; every shard is trimmed to the
/// smallest class count. Row order within a shard is a seeded shuffle.
pub fn partition_by_label(
    dataset: Arc<LabeledDataset>,
    n: usize,
    seed: u64,
) -> Result<Vec<Shard>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes];
    for (row, &label) in dataset.labels.iter().enumerate() {
        by_class[label].push(row);
    }
    let distinct = by_class.iter().filter(|c| !c.is_empty()).count();
    if distinct != n || dataset.classes != n {
        return Err(Error::LabelWorkerMismatch {
            classes: distinct,
            workers: n,
        });
    }
    let min_count = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let mut shards = Vec::with_capacity(n);
    for (class, mut rows) in by_class.into_iter().enumerate() {
        let mut rng = StreamRng::from_key(seed, PURPOSE_DATA, class as u64, 0);
        // Fisher-Yates, then trim to the common size.
        for i in (1..rows.len()).rev() {
            rows.swap(i, rng.index(i + 1));
        }
        rows.truncate(min_count);
        shards.push(Shard {
            owner: WorkerId(class + 1),
            dataset: dataset.clone(),
            rows,
        });
    }
    Ok(shards)
}

/// Gaussian-cluster classification data: `classes` clusters of `per_class`
/// points in `dim` dimensions with class means at mutual distance
/// `separation` (unit within-class noise). Requires `dim >= classes`.
pub fn synth_classification(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 || per_class < 1 {
        return Err(Error::Config(
            "need at least 2 classes and 1 example per class".into(),
        ));
    }
    if dim < classes {
        return Err(Error::Config(format!(
            "synthetic data needs dim >= classes ({dim} < {classes})"
        )));
    }
    if separation < 0.0 {
        return Err(Error::Config("separation must be nonnegative".into()));
    }
    // Class means on a scaled orthogonal basis: pairwise distance is
    // exactly `separation`.
    let scale = separation / std::f64::consts::SQRT_2;
    let n = classes * per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        for sample in 0..per_class {
            let mut rng = StreamRng::from_key(
                seed,
                PURPOSE_DATA,
                class as u64,
                1 + sample as u64,
            );
            for j in 0..dim {
                let mean = if j == class { scale } else { 0.0 };
                features.push(mean + standard_normal(&mut rng));
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(features, dim, labels, classes)
}

fn standard_normal(rng: &mut StreamRng) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}

/// An IDX tensor: shape plus typed payload.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxTensor {
    pub shape: Vec<usize>,
    pub data: IdxData,
}

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl IdxTensor {
    pub fn len(&self) -> usize {
        match &self.data {
            IdxData::U8(v) => v.len(),
            IdxData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const IDX_TYPE_U8: u8 = 0x08;
const IDX_TYPE_F32: u8 = 0x0D;

/// Parse an IDX file: magic `[0, 0, type, ndims]`, big-endian u32 dimension
/// sizes, then the row-major payload.
pub fn read_idx(path: &Path) -> Result<IdxTensor> {
    let mut reader = BufReader::new(File::open(path)?);
    read_idx_from(&mut reader)
}

/// Parse IDX content from any reader.
pub fn read_idx_from<R: Read>(reader: &mut R) -> Result<IdxTensor> {
    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::NotIdx("file shorter than magic".into()))?;
    if magic[0] != 0 || magic[1] != 0 {
        return Err(Error::NotIdx(format!(
            "leading bytes {:#04x} {:#04x} are not zero",
            magic[0], magic[1]
        )));
    }
    let ty = magic[2];
    if ty != IDX_TYPE_U8 && ty != IDX_TYPE_F32 {
        return Err(Error::NotIdx(format!("unsupported type byte {ty:#04x}")));
    }
    let ndims = magic[3] as usize;
    let mut shape = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        let mut b = [0u8; 4];
        reader.read_exact(&mut b).map_err(|_| Error::Truncated)?;
        shape.push(u32::from_be_bytes(b) as usize);
    }
    let count: usize = shape.iter().product();
    let data = match ty {
        IDX_TYPE_U8 => {
            let mut buf = vec![0u8; count];
            reader.read_exact(&mut buf).map_err(|_| Error::Truncated)?;
            IdxData::U8(buf)
        }
        _ => {
            let mut buf = vec![0u8; count * 4];
            reader.read_exact(&mut buf).map_err(|_| Error::Truncated)?;
            IdxData::F32(
                buf.chunks_exact(4)
                    .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
    };
    Ok(IdxTensor { shape, data })
}

/// Write an IDX file (inverse of [`read_idx`]).
pub fn write_idx(path: &Path, tensor: &IdxTensor) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_idx_to(&mut writer, tensor)
}

pub fn write_idx_to<W: Write>(writer: &mut W, tensor: &IdxTensor) -> Result<()> {
    let count: usize = tensor.shape.iter().product();
    if count != tensor.len() {
        return Err(Error::DimensionMismatch(format!(
            "shape product {count} != payload length {}",
            tensor.len()
        )));
    }
    let ty = match tensor.data {
        IdxData::U8(_) => IDX_TYPE_U8,
        IdxData::F32(_) => IDX_TYPE_F32,
    };
    writer.write_all(&[0, 0, ty, tensor.shape.len() as u8])?;
    for &s in &tensor.shape {
        writer.write_all(&(s as u32).to_be_bytes())?;
    }
    match &tensor.data {
        IdxData::U8(v) => writer.write_all(v)?,
        IdxData::F32(v) => {
            for x in v {
                writer.write_all(&x.to_be_bytes())?;
            }
        }
    }
    Ok(())
}

/// Assemble a classification dataset from an IDX image tensor (first
/// dimension indexes examples) and an IDX label vector. Byte images are
/// scaled to `[0, 1]`.
pub fn dataset_from_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let images = read_idx(images)?;
    let labels = read_idx(labels)?;
    if images.shape.is_empty() || labels.shape.len() != 1 {
        return Err(Error::NotIdx("unexpected tensor ranks".into()));
    }
    let n = images.shape[0];
    if labels.shape[0] != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} images but {} labels",
            labels.shape[0]
        )));
    }
    let dim: usize = images.shape[1..].iter().product();
    let features: Vec<f64> = match &images.data {
        IdxData::U8(v) => v.iter().map(|&b| f64::from(b) / 255.0).collect(),
        IdxData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
    };
    let label_values: Vec<usize> = match &labels.data {
        IdxData::U8(v) => v.iter().map(|&b| b as usize).collect(),
        IdxData::F32(v) => v.iter().map(|&x| x as usize).collect(),
    };
    let classes = label_values.iter().copied().max().unwrap_or(0) + 1;
    LabeledDataset::new(features, dim.max(1), label_values, classes)
}
