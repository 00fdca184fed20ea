// SPDX-License-Identifier: Apache-2.0

//! Labeled datasets, the IDX and CIFAR-10 binary parsers, seeded synthetic
//! Gaussian clusters, and class-subset views used by the continual protocol.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;
pub const CIFAR_RECORD: usize = CIFAR_PIXELS + 1;
pub const CIFAR_CLASSES: usize = 10;
pub const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Mnist,
    Fmnist,
    Cifar10,
    Synthetic,
}

/// Feature vectors with integer labels in `[0, n_classes)`.
///
/// Samples are stored row-major as `f32` (one row per sample); models widen
/// rows to `f64` batch by batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: Array2<f32>,
    labels: Vec<usize>,
    n_classes: usize,
    pub split: Split,
    pub source: Source,
}

impl LabeledDataset {
    pub fn new(
        samples: Array2<f32>,
        labels: Vec<usize>,
        n_classes: usize,
        split: Split,
        source: Source,
    ) -> Result<Self> {
        if samples.nrows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} samples but {} labels",
                samples.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Value(format!(
                "label {bad} outside [0, {n_classes})"
            )));
        }
        Ok(Self {
            samples,
            labels,
            n_classes,
            split,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn samples(&self) -> ArrayView2<'_, f32> {
        self.samples.view()
    }

    pub fn sample(&self, i: usize) -> ArrayView1<'_, f32> {
        self.samples.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Sorted distinct labels that actually occur.
    pub fn classes_present(&self) -> Vec<usize> {
        let mut seen = vec![false; self.n_classes];
        for &l in &self.labels {
            seen[l] = true;
        }
        (0..self.n_classes).filter(|&c| seen[c]).collect()
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Rows `indices` widened to `f64`.
    pub fn batch_f64(&self, indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((indices.len(), self.dim()));
        for (row, &i) in out.rows_mut().into_iter().zip(indices) {
            for (o, &v) in row.into_iter().zip(self.samples.row(i)) {
                *o = f64::from(v);
            }
        }
        out
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.samples.mapv(f64::from)
    }

    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            samples: self.samples.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            split: self.split,
            source: self.source,
        }
    }

    /// Same samples, every label replaced by `label`.
    pub fn with_label(&self, label: usize, n_classes: usize) -> Result<LabeledDataset> {
        LabeledDataset::new(
            self.samples.clone(),
            vec![label; self.len()],
            n_classes,
            self.split,
            self.source,
        )
    }

    pub fn with_n_classes(mut self, n_classes: usize) -> Result<LabeledDataset> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Value(format!(
                "label {bad} outside [0, {n_classes})"
            )));
        }
        self.n_classes = n_classes;
        Ok(self)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }

    /// Row-wise concatenation. `n_classes` is the maximum over the parts.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<LabeledDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Value("cannot concatenate zero datasets".into()))?;
        let dim = first.dim();
        if let Some(bad) = parts.iter().find(|p| p.dim() != dim) {
            return Err(Error::Shape {
                expected: dim,
                got: bad.dim(),
            });
        }
        let views: Vec<_> = parts.iter().map(|p| p.samples.view()).collect();
        let samples =
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Consistency(e.to_string()))?;
        let labels = parts
            .iter()
            .flat_map(|p| p.labels.iter().copied())
            .collect();
        let n_classes = parts.iter().map(|p| p.n_classes).max().unwrap_or(0);
        LabeledDataset::new(samples, labels, n_classes, first.split, first.source)
    }

    /// One single-class dataset per entry of `0..n_classes`, in label order.
    pub fn split_by_class(&self) -> Vec<LabeledDataset> {
        (0..self.n_classes)
            .map(|c| {
                let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
                self.select(&idx)
            })
            .collect()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::Length(format!(
                "{what}: header truncated at byte {offset} (file has {} bytes)",
                bytes.len()
            ))
        })
}

/// Parsed IDX image file: `count` images of `rows × cols` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "idx images: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "idx images")? as usize;
    let rows = be_u32(bytes, 8, "idx images")? as usize;
    let cols = be_u32(bytes, 12, "idx images")? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Length(format!(
            "idx images: header declares {need} pixel bytes, file has {}",
            body.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..need].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "idx labels: magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "idx labels")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Length(format!(
            "idx labels: header declares {count} labels, file has {}",
            body.len()
        )));
    }
    Ok(body[..count].to_vec())
}

/// Combines parsed IDX images and labels. Pixels are scaled by 1/255.
pub fn idx_dataset(images: &IdxImages, labels: &[u8], n_classes: usize) -> Result<LabeledDataset> {
    if images.count != labels.len() {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let dim = images.rows * images.cols;
    let samples = Array2::from_shape_vec(
        (images.count, dim),
        images
            .pixels
            .iter()
            .map(|&p| f32::from(p) / 255.0)
            .collect(),
    )
    .map_err(|e| Error::Consistency(e.to_string()))?;
    LabeledDataset::new(
        samples,
        labels.iter().map(|&l| usize::from(l)).collect(),
        n_classes,
        Split::Train,
        Source::Mnist,
    )
}

/// Reads an MNIST-style image/label file pair.
pub fn load_idx_pair(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledDataset> {
    let images = parse_idx_images(&read_file(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read_file(labels_path.as_ref())?)?;
    idx_dataset(&images, &labels, MNIST_CLASSES)
}

/// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte` from `dir`.
pub fn load_mnist_dir(
    dir: impl AsRef<Path>,
    source: Source,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let dir = dir.as_ref();
    let train = load_idx_pair(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )?
    .with_source(source);
    let test = load_idx_pair(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )?
    .with_source(source)
    .with_split(Split::Test);
    Ok((train, test))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_idx_images(ds: &LabeledDataset, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows * cols != ds.dim() {
        return Err(Error::Shape {
            expected: ds.dim(),
            got: rows * cols,
        });
    }
    let mut out = Vec::with_capacity(16 + ds.len() * ds.dim());
    for word in [IDX_IMAGES_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend(ds.samples.iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn encode_idx_labels(ds: &LabeledDataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + ds.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        out.push(
            u8::try_from(l).map_err(|_| Error::Value(format!("label {l} does not fit a byte")))?,
        );
    }
    Ok(out)
}

/// Parses concatenated 3073-byte CIFAR-10 records (label byte, then
/// 3072 channel-major pixel bytes).
pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledDataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "cifar-10: {} bytes is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = usize::from(record[0]);
        if label >= CIFAR_CLASSES {
            return Err(Error::Value(format!(
                "cifar-10 record {i}: label {label} >= 10"
            )));
        }
        labels.push(label);
        pixels.extend(record[1..].iter().map(|&p| f32::from(p) / 255.0));
    }
    let samples = Array2::from_shape_vec((n, CIFAR_PIXELS), pixels)
        .map_err(|e| Error::Consistency(e.to_string()))?;
    LabeledDataset::new(
        samples,
        labels,
        CIFAR_CLASSES,
        Split::Train,
        Source::Cifar10,
    )
}

pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P]) -> Result<LabeledDataset> {
    let parts = batch_paths
        .iter()
        .map(|p| parse_cifar10(&read_file(p.as_ref())?))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&LabeledDataset> = parts.iter().collect();
    LabeledDataset::concat(&refs)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10_dir(dir: impl AsRef<Path>) -> Result<(LabeledDataset, LabeledDataset)> {
    let dir = dir.as_ref();
    let train: Vec<_> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .collect();
    let train = load_cifar10(&train)?;
    let test = load_cifar10(&[dir.join("test_batch.bin")])?.with_split(Split::Test);
    Ok((train, test))
}

pub fn encode_cifar10(ds: &LabeledDataset) -> Result<Vec<u8>> {
    if ds.dim() != CIFAR_PIXELS {
        return Err(Error::Shape {
            expected: CIFAR_PIXELS,
            got: ds.dim(),
        });
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (row, &label) in ds.samples.rows().into_iter().zip(&ds.labels) {
        if label >= CIFAR_CLASSES {
            return Err(Error::Value(format!("label {label} >= 10")));
        }
        out.push(label as u8);
        out.extend(row.iter().map(|&v| quantize(v)));
    }
    Ok(out)
}

/// Isotropic Gaussian clusters, one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub cluster_means: Vec<Vec<f64>>,
    pub cluster_std: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Means on scaled coordinate axes so every pair of clusters is
    /// `separation` apart. Needs `dim >= n_classes`.
    pub fn equidistant(
        n_classes: usize,
        dim: usize,
        separation: f64,
        cluster_std: f64,
        samples_per_class: usize,
        seed: u64,
    ) -> Self {
        let scale = separation / std::f64::consts::SQRT_2;
        let cluster_means = (0..n_classes)
            .map(|c| {
                let mut m = vec![0.0; dim];
                if c < dim {
                    m[c] = scale;
                }
                m
            })
            .collect();
        Self {
            n_classes,
            dim,
            cluster_means,
            cluster_std,
            samples_per_class,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Value(format!("n_classes = {} < 2", self.n_classes)));
        }
        if !(self.cluster_std.is_finite() && self.cluster_std > 0.0) {
            return Err(Error::Value(format!(
                "cluster_std = {} must be > 0",
                self.cluster_std
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Value("samples_per_class must be >= 1".into()));
        }
        if self.cluster_means.len() != self.n_classes {
            return Err(Error::Value(format!(
                "{} cluster means for {} classes",
                self.cluster_means.len(),
                self.n_classes
            )));
        }
        if let Some(m) = self.cluster_means.iter().find(|m| m.len() != self.dim) {
            return Err(Error::Shape {
                expected: self.dim,
                got: m.len(),
            });
        }
        Ok(())
    }
}

/// Draws the clusters and splits each class 80/20 into train/test.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_test = spec.samples_per_class / 5;
    let n_train = spec.samples_per_class - n_test;
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for (c, mean) in spec.cluster_means.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            let (pixels, labels) = if i < n_train { &mut train } else { &mut test };
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                pixels.push((m + spec.cluster_std * z) as f32);
            }
            labels.push(c);
        }
    }
    let build = |(pixels, labels): (Vec<f32>, Vec<usize>), split| {
        let samples = Array2::from_shape_vec((labels.len(), spec.dim), pixels)
            .map_err(|e| Error::Consistency(e.to_string()))?;
        LabeledDataset::new(samples, labels, spec.n_classes, split, Source::Synthetic)
    };
    Ok((build(train, Split::Train)?, build(test, Split::Test)?))
}

/// Keeps only samples of `classes`; with `relabel`, class `classes[i]`
/// becomes label `i`.
pub fn subset_classes(
    ds: &LabeledDataset,
    classes: &[usize],
    relabel: bool,
) -> Result<LabeledDataset> {
    let present = ds.classes_present();
    if let Some(&bad) = classes.iter().find(|c| !present.contains(c)) {
        return Err(Error::Value(format!("class {bad} not present in dataset")));
    }
    let keep: Vec<usize> = (0..ds.len())
        .filter(|&i| classes.contains(&ds.labels[i]))
        .collect();
    let mut out = ds.select(&keep);
    if relabel {
        for l in &mut out.labels {
            *l = classes.iter().position(|c| c == l).expect("filtered above");
        }
        out.n_classes = classes.len();
    }
    Ok(out)
}

/// Seeded shuffle of `0..n_total`: the first `n_id` classes are in-distribution,
/// the remainder (in shuffled order) form the novel-class stream.
pub fn choose_classes(n_total: usize, n_id: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_id == 0 || n_id > n_total {
        return Err(Error::Value(format!(
            "cannot pick {n_id} of {n_total} classes"
        )));
    }
    let mut order: Vec<usize> = (0..n_total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let stream = order.split_off(n_id);
    Ok((order, stream))
}

/// Mean of each class's samples; used by nearest-mean reference classifiers.
pub fn class_means(ds: &LabeledDataset) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((ds.n_classes, ds.dim()));
    let mut counts = vec![0usize; ds.n_classes];
    for (row, &l) in ds.samples.rows().into_iter().zip(&ds.labels) {
        let mut acc = sums.slice_mut(s![l, ..]);
        acc.zip_mut_with(&row, |a, &v| *a += f64::from(v));
        counts[l] += 1;
    }
    for (mut row, &n) in sums.rows_mut().into_iter().zip(&counts) {
        if n > 0 {
            row /= n as f64;
        }
    }
    sums
}
