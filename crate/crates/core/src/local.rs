//! Supervised training of each client on its own shard.

use std::collections::BTreeMap;
use std::sync::Arc;

use fedsyn_nn::{apply_bn_updates, BackwardOptions, ForwardOptions, Grads, Sgd, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetHandle, DatasetView};
use crate::ensemble::EnsembleBundle;
use crate::error::{FedSynError, Result};
use crate::losses;
use crate::models::{build_model, ClientModel, ModelSpec};
use crate::partition::PartitionPlan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub loss_id: String,
    /// Shuffle seed; [`train_all_clients`] gives client `k` seed `seed + k`
    /// for both initialisation and shuffling.
    pub seed: u64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 128, learning_rate: 0.01, momentum: 0.9, loss_id: CROSS_ENTROPY.into(), seed: 0 }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FedSynError::InvalidArgument("local batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FedSynError::InvalidArgument(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FedSynError::InvalidArgument(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

pub const CROSS_ENTROPY: &str = "cross_entropy";

/// What a local loss may know about the shard besides the current batch.
#[derive(Clone, Debug)]
pub struct ShardInfo {
    /// Examples per class in the whole shard.
    pub class_counts: Vec<usize>,
}

/// A supervised objective: batch mean loss and its gradient w.r.t. the logits.
pub trait LocalLoss: Send + Sync {
    fn loss_and_grad(&self, logits: &Tensor, labels: &[usize], shard: &ShardInfo) -> Result<(f64, Tensor)>;
}

struct CrossEntropy;

impl LocalLoss for CrossEntropy {
    fn loss_and_grad(&self, logits: &Tensor, labels: &[usize], _: &ShardInfo) -> Result<(f64, Tensor)> {
        losses::cross_entropy(logits, labels)
    }
}

/// Named local losses. The default registry holds `cross_entropy`; other
/// objectives such as label-distribution-aware margins can be registered.
#[derive(Clone)]
pub struct LossRegistry {
    losses: BTreeMap<String, Arc<dyn LocalLoss>>,
}

impl Default for LossRegistry {
    fn default() -> Self {
        let mut r = Self { losses: BTreeMap::new() };
        r.register(CROSS_ENTROPY, Arc::new(CrossEntropy));
        r
    }
}

impl LossRegistry {
    pub fn register(&mut self, name: &str, loss: Arc<dyn LocalLoss>) {
        self.losses.insert(name.to_string(), loss);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn LocalLoss>> {
        self.losses.get(name).cloned().ok_or_else(|| FedSynError::UnknownLoss(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.losses.keys().map(String::as_str)
    }
}

/// Trains `model` in place for `cfg.epochs` epochs of shuffled mini-batch
/// SGD with momentum. Returns the mean loss of every epoch.
pub fn local_update(model: &mut ClientModel, shard: &DatasetView, cfg: &LocalTrainConfig) -> Result<Vec<f64>> {
    local_update_with(model, shard, cfg, &LossRegistry::default())
}

pub fn local_update_with(
    model: &mut ClientModel,
    shard: &DatasetView,
    cfg: &LocalTrainConfig,
    registry: &LossRegistry,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let loss = registry.get(&cfg.loss_id)?;
    if shard.is_empty() {
        return Err(FedSynError::InvalidArgument("cannot train on an empty shard".into()));
    }
    let nc = model.spec().num_classes;
    let mut class_counts = vec![0; nc];
    for &i in shard.indices() {
        let l = shard.dataset().labels()[i];
        if l >= nc {
            return Err(FedSynError::InvalidArgument(format!("label {l} but model has {nc} classes")));
        }
        class_counts[l] += 1;
    }
    let info = ShardInfo { class_counts };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(model.store(), cfg.learning_rate, cfg.momentum);
    let mut grads = Grads::zeros_like(model.store());
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = shard.batch(chunk);
            let l = train_step(model, &mut opt, &mut grads, x, &y, loss.as_ref(), &info)?;
            if !l.is_finite() {
                return Err(FedSynError::NonFinite(format!("local loss at epoch {epoch}")));
            }
            sum += l * chunk.len() as f64;
            seen += chunk.len();
        }
        trace.push(sum / seen as f64);
    }
    Ok(trace)
}

fn train_step(
    model: &mut ClientModel,
    opt: &mut Sgd,
    grads: &mut Grads,
    x: Tensor,
    y: &[usize],
    loss: &dyn LocalLoss,
    info: &ShardInfo,
) -> Result<f64> {
    let out = model.network().forward(model.store(), x, ForwardOptions::train())?;
    let (l, dlogits) = loss.loss_and_grad(&out.output, y, info)?;
    grads.zero();
    let tape = out.tape.expect("recorded");
    model.network().backward(model.store(), tape, dlogits, BackwardOptions { grads: Some(grads), ..Default::default() });
    opt.step(model.store_mut(), grads);
    apply_bn_updates(model.store_mut(), &out.updates);
    Ok(l)
}

/// How [`train_clients`] schedules its clients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Serial,
    #[default]
    Parallel,
}

/// Trains one client per plan entry, each starting from `inits[k]` and
/// shuffling with seed `cfg.seed + k`. Results are ordered by client index
/// and do not depend on the execution mode.
pub fn train_clients(
    inits: Vec<ClientModel>,
    plan: &PartitionPlan,
    data: &DatasetHandle,
    cfg: &LocalTrainConfig,
    exec: Execution,
    registry: &LossRegistry,
) -> Result<(Vec<ClientModel>, Vec<Vec<f64>>)> {
    if inits.len() != plan.num_clients {
        return Err(FedSynError::InvalidArgument(format!(
            "{} models for {} clients",
            inits.len(),
            plan.num_clients
        )));
    }
    plan.validate(data.len())?;
    if let Some(k) = plan.assignments.iter().position(Vec::is_empty) {
        return Err(FedSynError::EmptyShard { client: k });
    }
    let job = |(k, mut model): (usize, ClientModel)| -> Result<(ClientModel, Vec<f64>)> {
        let shard = data.view(plan.assignments[k].clone());
        let ccfg = LocalTrainConfig { seed: cfg.seed.wrapping_add(k as u64), ..cfg.clone() };
        let trace = local_update_with(&mut model, &shard, &ccfg, registry)?;
        log::info!("client {k}: {} examples, final loss {:?}", shard.len(), trace.last());
        Ok((model, trace))
    };
    let results: Vec<Result<(ClientModel, Vec<f64>)>> = match exec {
        Execution::Serial => inits.into_iter().enumerate().map(job).collect(),
        Execution::Parallel => inits.into_par_iter().enumerate().map(job).collect(),
    };
    let mut models = Vec::with_capacity(results.len());
    let mut traces = Vec::with_capacity(results.len());
    for r in results {
        let (m, t) = r?;
        models.push(m);
        traces.push(t);
    }
    Ok((models, traces))
}

/// Freshly initialised client models, client `k` seeded with `seed + k`.
pub fn client_inits(archs: &[ModelSpec], seed: u64) -> Result<Vec<ClientModel>> {
    archs.iter().enumerate().map(|(k, s)| build_model(s, seed.wrapping_add(k as u64))).collect()
}

/// Builds client `k` as `archs[k]` seeded with `cfg.seed + k`, trains it on
/// its shard and collects the bundle. Clients share no state.
pub fn train_all_clients(
    plan: &PartitionPlan,
    data: &DatasetHandle,
    archs: &[ModelSpec],
    cfg: &LocalTrainConfig,
    exec: Execution,
) -> Result<EnsembleBundle> {
    if archs.len() != plan.num_clients {
        return Err(FedSynError::InvalidArgument(format!(
            "{} architectures for {} clients",
            archs.len(),
            plan.num_clients
        )));
    }
    let inits = client_inits(archs, cfg.seed)?;
    let (models, _) = train_clients(inits, plan, data, cfg, exec, &LossRegistry::default())?;
    EnsembleBundle::new(models, plan.client_sizes(), data.name())
}
