//! Labeled image datasets in NHWC layout, normalised per channel.

use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use fedsyn_nn::Tensor;
use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{FedSynError, Result};

/// Environment variable naming the dataset cache directory.
pub const DATA_DIR_ENV: &str = "FEDSYN_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = FedSynError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(FedSynError::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// The datasets this crate knows how to read from disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetName {
    #[serde(rename = "mnist")]
    Mnist,
    #[serde(rename = "fashion-mnist")]
    FashionMnist,
    #[serde(rename = "cifar10")]
    Cifar10,
}

impl DatasetName {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
            DatasetName::Cifar10 => "cifar10",
        }
    }

    /// `[height, width, channels]`.
    pub fn image_shape(&self) -> [usize; 3] {
        match self {
            DatasetName::Mnist | DatasetName::FashionMnist => [28, 28, 1],
            DatasetName::Cifar10 => [32, 32, 3],
        }
    }

    pub fn num_classes(&self) -> usize {
        10
    }

    /// Fixed per-channel (mean, std) of the training split on the [0, 1] scale.
    pub fn normalization(&self) -> (&'static [f32], &'static [f32]) {
        match self {
            DatasetName::Mnist => (&[0.1307], &[0.3081]),
            DatasetName::FashionMnist => (&[0.2860], &[0.3530]),
            DatasetName::Cifar10 => (&[0.4914, 0.4822, 0.4465], &[0.2470, 0.2435, 0.2616]),
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DatasetName {
    type Err = FedSynError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "mnist" => Ok(DatasetName::Mnist),
            "fashion-mnist" | "fashionmnist" | "fmnist" => Ok(DatasetName::FashionMnist),
            "cifar10" | "cifar-10" => Ok(DatasetName::Cifar10),
            _ => Err(FedSynError::UnknownDataset(s.to_string())),
        }
    }
}

/// An ordered, normalised collection of labeled images.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    name: String,
    split: Split,
    num_classes: usize,
    features: Tensor,
    labels: Vec<usize>,
}

impl DatasetHandle {
    /// Builds a handle from in-memory data. `features` is `[n, h, w, c]`.
    pub fn from_parts(
        name: impl Into<String>,
        split: Split,
        num_classes: usize,
        features: Tensor,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if features.shape().len() != 4 {
            return Err(FedSynError::InvalidArgument(format!(
                "features must be [n, h, w, c], got {:?}",
                features.shape()
            )));
        }
        if features.batch() != labels.len() {
            return Err(FedSynError::InvalidArgument(format!(
                "{} feature rows but {} labels",
                features.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(FedSynError::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { name: name.into(), split, num_classes, features, labels })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[h, w, c]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.features.shape();
        [s[1], s[2], s[3]]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Features and labels of the given example indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let x = self.features.gather_rows(indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    /// Count of examples per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// A new handle holding only `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let (features, labels) = self.batch(indices);
        Self { name: self.name.clone(), split: self.split, num_classes: self.num_classes, features, labels }
    }

    /// First `per_class` examples of every class, keeping dataset order.
    pub fn take_per_class(&self, per_class: usize) -> Self {
        let mut seen = vec![0; self.num_classes];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let l = self.labels[i];
                seen[l] += 1;
                seen[l] <= per_class
            })
            .collect();
        self.subset(&keep)
    }

    pub fn view(&self, indices: Vec<usize>) -> DatasetView<'_> {
        DatasetView { data: self, indices }
    }
}

/// A client's shard: a borrowed dataset restricted to some indices.
#[derive(Clone, Debug)]
pub struct DatasetView<'a> {
    data: &'a DatasetHandle,
    indices: Vec<usize>,
}

impl<'a> DatasetView<'a> {
    pub fn full(data: &'a DatasetHandle) -> Self {
        Self { data, indices: (0..data.len()).collect() }
    }

    pub fn dataset(&self) -> &'a DatasetHandle {
        self.data
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Features/labels of view positions `positions` (not dataset indices).
    pub fn batch(&self, positions: &[usize]) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = positions.iter().map(|&p| self.indices[p]).collect();
        self.data.batch(&idx)
    }
}

/// `$FEDSYN_DATA_DIR`, or `./data` when unset.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads `name`/`split` from [`default_data_dir`].
pub fn load_dataset(name: &str, split: Split) -> Result<DatasetHandle> {
    load_dataset_from(&default_data_dir(), name, split)
}

/// Loads a dataset from `dir`. Layout:
///
/// ```text
/// dir/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]
/// dir/fashion-mnist/  (same as mnist)
/// dir/cifar10/cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin
/// ```
pub fn load_dataset_from(dir: &Path, name: &str, split: Split) -> Result<DatasetHandle> {
    let ds: DatasetName = name.parse()?;
    let (pixels, labels, n) = match ds {
        DatasetName::Mnist | DatasetName::FashionMnist => {
            let root = dir.join(ds.as_str());
            let prefix = match split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            let (pixels, n, rows, cols) = read_idx_images(&root, &format!("{prefix}-images-idx3-ubyte"))?;
            if (rows, cols) != (28, 28) {
                return Err(FedSynError::CorruptDataset {
                    path: root,
                    reason: format!("expected 28x28 images, got {rows}x{cols}"),
                });
            }
            let labels = read_idx_labels(&root, &format!("{prefix}-labels-idx1-ubyte"))?;
            (pixels, labels, n)
        }
        DatasetName::Cifar10 => {
            let root = dir.join("cifar10").join("cifar-10-batches-bin");
            let files: Vec<String> = match split {
                Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
                Split::Test => vec!["test_batch.bin".into()],
            };
            let mut pixels = Vec::new();
            let mut labels = Vec::new();
            for f in files {
                read_cifar_batch(&root.join(f), &mut pixels, &mut labels)?;
            }
            let n = labels.len();
            (pixels, labels, n)
        }
    };
    if labels.len() != n {
        return Err(FedSynError::CorruptDataset {
            path: dir.join(ds.as_str()),
            reason: format!("{n} images but {} labels", labels.len()),
        });
    }
    let [h, w, c] = ds.image_shape();
    let (mean, std) = ds.normalization();
    let data: Vec<f32> = pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let ch = i % c;
            (p as f32 / 255.0 - mean[ch]) / std[ch]
        })
        .collect();
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= ds.num_classes()) {
        return Err(FedSynError::CorruptDataset {
            path: dir.join(ds.as_str()),
            reason: format!("label {bad} out of range"),
        });
    }
    DatasetHandle::from_parts(ds.as_str(), split, ds.num_classes(), Tensor::new([n, h, w, c], data), labels)
}

/// Reads `root/stem` or `root/stem.gz`.
fn read_maybe_gz(root: &Path, stem: &str) -> Result<(PathBuf, Vec<u8>)> {
    let plain = root.join(stem);
    let gz = root.join(format!("{stem}.gz"));
    let mut buf = Vec::new();
    if plain.exists() {
        File::open(&plain)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|source| FedSynError::DatasetIo { path: plain.clone(), source })?;
        Ok((plain, buf))
    } else {
        File::open(&gz)
            .and_then(|f| GzDecoder::new(f).read_to_end(&mut buf))
            .map_err(|source| FedSynError::DatasetIo { path: plain.clone(), source })?;
        Ok((gz, buf))
    }
}

fn be_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]])
}

fn read_idx_images(root: &Path, stem: &str) -> Result<(Vec<u8>, usize, usize, usize)> {
    let (path, buf) = read_maybe_gz(root, stem)?;
    let corrupt = |reason: String| FedSynError::CorruptDataset { path: path.clone(), reason };
    if buf.len() < 16 || be_u32(&buf, 0) != 2051 {
        return Err(corrupt("bad IDX image header".into()));
    }
    let (n, rows, cols) = (be_u32(&buf, 4) as usize, be_u32(&buf, 8) as usize, be_u32(&buf, 12) as usize);
    if buf.len() != 16 + n * rows * cols {
        return Err(corrupt(format!("expected {} bytes, found {}", 16 + n * rows * cols, buf.len())));
    }
    Ok((buf[16..].to_vec(), n, rows, cols))
}

fn read_idx_labels(root: &Path, stem: &str) -> Result<Vec<u8>> {
    let (path, buf) = read_maybe_gz(root, stem)?;
    if buf.len() < 8 || be_u32(&buf, 0) != 2049 || buf.len() != 8 + be_u32(&buf, 4) as usize {
        return Err(FedSynError::CorruptDataset { path, reason: "bad IDX label file".into() });
    }
    Ok(buf[8..].to_vec())
}

/// Appends one CIFAR-10 binary batch, converting planar RGB to HWC.
fn read_cifar_batch(path: &Path, pixels: &mut Vec<u8>, labels: &mut Vec<u8>) -> Result<()> {
    const PLANE: usize = 1024;
    const RECORD: usize = 1 + 3 * PLANE;
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| FedSynError::DatasetIo { path: path.to_path_buf(), source })?;
    if buf.is_empty() || buf.len() % RECORD != 0 {
        return Err(FedSynError::CorruptDataset {
            path: path.to_path_buf(),
            reason: format!("length {} is not a multiple of {RECORD}", buf.len()),
        });
    }
    for rec in buf.chunks_exact(RECORD) {
        labels.push(rec[0]);
        let planes = &rec[1..];
        for p in 0..PLANE {
            for ch in 0..3 {
                pixels.push(planes[ch * PLANE + p]);
            }
        }
    }
    Ok(())
}
