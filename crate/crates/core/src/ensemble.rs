//! The server's view of the uploaded client models.

use std::path::Path;

use fedsyn_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::DatasetHandle;
use crate::error::{io_err, FedSynError, Result};
use crate::models::{Classifier, ClientModel};

/// The uploaded client models together with their shard sizes.
#[derive(Clone, Debug)]
pub struct EnsembleBundle {
    clients: Vec<ClientModel>,
    sizes: Vec<usize>,
    dataset: String,
    num_classes: usize,
}

/// How client logits are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogitWeighting {
    /// Plain mean over clients.
    #[default]
    Uniform,
    /// Weight client `k` by `n_k / n`.
    Size,
}

impl EnsembleBundle {
    pub fn new(clients: Vec<ClientModel>, sizes: Vec<usize>, dataset: impl Into<String>) -> Result<Self> {
        if clients.is_empty() {
            return Err(FedSynError::InvalidArgument("a bundle needs at least one client".into()));
        }
        if clients.len() != sizes.len() {
            return Err(FedSynError::InvalidArgument(format!(
                "{} clients but {} sizes",
                clients.len(),
                sizes.len()
            )));
        }
        if sizes.contains(&0) {
            return Err(FedSynError::InvalidArgument("client sizes must be positive".into()));
        }
        let num_classes = clients[0].num_classes();
        let shape = clients[0].input_shape();
        for c in &clients[1..] {
            if c.num_classes() != num_classes {
                return Err(FedSynError::InvalidArgument("clients disagree on the number of classes".into()));
            }
            if c.input_shape() != shape {
                return Err(FedSynError::InvalidArgument(format!(
                    "clients disagree on input shape: {:?} vs {:?}",
                    shape,
                    c.input_shape()
                )));
            }
        }
        Ok(Self { clients, sizes, dataset: dataset.into(), num_classes })
    }

    pub fn clients(&self) -> &[ClientModel] {
        &self.clients
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn dataset(&self) -> &str {
        &self.dataset
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.clients[0].input_shape()
    }

    pub fn is_homogeneous(&self) -> bool {
        self.clients.windows(2).all(|w| w[0].same_layout(&w[1]))
    }

    /// Per-client weights used by [`LogitWeighting`].
    pub fn weights(&self, mode: LogitWeighting) -> Vec<f64> {
        match mode {
            LogitWeighting::Uniform => vec![1.0 / self.len() as f64; self.len()],
            LogitWeighting::Size => {
                let n: usize = self.sizes.iter().sum();
                self.sizes.iter().map(|&s| s as f64 / n as f64).collect()
            }
        }
    }

    /// Writes `client_<k>.bin` checkpoints and a `bundle.json` index into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut files = Vec::new();
        for (k, c) in self.clients.iter().enumerate() {
            let name = format!("client_{k}.bin");
            c.save(&dir.join(&name), &self.dataset)?;
            files.push(name);
        }
        let index = BundleIndex { dataset: self.dataset.clone(), num_classes: self.num_classes, sizes: self.sizes.clone(), clients: files };
        let path = dir.join("bundle.json");
        std::fs::write(&path, serde_json::to_string_pretty(&index).expect("index serializes")).map_err(io_err(path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("bundle.json");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let index: BundleIndex = serde_json::from_str(&text)
            .map_err(|e| FedSynError::Format { what: path.display().to_string(), reason: e.to_string() })?;
        let clients =
            index.clients.iter().map(|f| ClientModel::load(&dir.join(f)).map(|(m, _)| m)).collect::<Result<Vec<_>>>()?;
        Self::new(clients, index.sizes, index.dataset)
    }
}

#[derive(Serialize, Deserialize)]
struct BundleIndex {
    dataset: String,
    num_classes: usize,
    sizes: Vec<usize>,
    clients: Vec<String>,
}

/// `(1/m) sum_k f^k(batch)`: the ensemble teacher's logits.
pub fn average_logits(bundle: &EnsembleBundle, batch: &Tensor) -> Result<Tensor> {
    average_logits_weighted(bundle, batch, LogitWeighting::Uniform)
}

pub fn average_logits_weighted(bundle: &EnsembleBundle, batch: &Tensor, mode: LogitWeighting) -> Result<Tensor> {
    let logits = bundle.clients.iter().map(|c| c.logits(batch)).collect::<Result<Vec<_>>>()?;
    Ok(combine_logits(&logits, &bundle.weights(mode)))
}

/// Weighted sum of per-client logits, accumulated in client order.
pub(crate) fn combine_logits(logits: &[Tensor], weights: &[f64]) -> Tensor {
    let mut acc = vec![0.0f64; logits[0].len()];
    for (l, &w) in logits.iter().zip(weights) {
        for (a, &v) in acc.iter_mut().zip(l.data()) {
            *a += w * v as f64;
        }
    }
    Tensor::new(logits[0].shape().to_vec(), acc.into_iter().map(|v| v as f32).collect())
}

/// `theta = sum_k (n_k / n) theta^k` over parameters and batch-norm buffers.
pub fn fedavg_aggregate(bundle: &EnsembleBundle) -> Result<ClientModel> {
    if !bundle.is_homogeneous() {
        let archs: Vec<String> = bundle.clients.iter().map(|c| c.arch().to_string()).collect();
        return Err(FedSynError::Unsupported(format!(
            "parameter averaging needs identical architectures, got [{}]",
            archs.join(", ")
        )));
    }
    let weights = bundle.weights(LogitWeighting::Size);
    let mut acc = vec![0.0f64; bundle.clients[0].flatten().len()];
    for (c, &w) in bundle.clients.iter().zip(&weights) {
        for (a, v) in acc.iter_mut().zip(c.flatten()) {
            *a += w * v as f64;
        }
    }
    let mut out = bundle.clients[0].clone();
    out.unflatten(&acc.into_iter().map(|v| v as f32).collect::<Vec<_>>())?;
    Ok(out)
}

/// Fraction of `test` whose argmax logit equals the label.
pub fn evaluate(model: &dyn Classifier, test: &DatasetHandle) -> Result<f64> {
    evaluate_batched(model, test, 500)
}

pub fn evaluate_batched(model: &dyn Classifier, test: &DatasetHandle, batch_size: usize) -> Result<f64> {
    if test.is_empty() {
        return Err(FedSynError::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    if model.input_shape() != test.image_shape() {
        return Err(FedSynError::InvalidArgument(format!(
            "model expects {:?} images, dataset has {:?}",
            model.input_shape(),
            test.image_shape()
        )));
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = test.batch(chunk);
        let pred = model.logits(&x)?.argmax_rows();
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / test.len() as f64)
}

/// The ensemble teacher itself as a classifier.
pub struct EnsembleClassifier<'a> {
    pub bundle: &'a EnsembleBundle,
    pub weighting: LogitWeighting,
}

impl Classifier for EnsembleClassifier<'_> {
    fn num_classes(&self) -> usize {
        self.bundle.num_classes
    }

    fn input_shape(&self) -> [usize; 3] {
        self.bundle.input_shape()
    }

    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        average_logits_weighted(self.bundle, batch, self.weighting)
    }
}
