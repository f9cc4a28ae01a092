//! One-shot federated learning with data-free ensemble distillation.
//!
//! Clients train on label-skewed shards and upload their models once. The
//! server trains a generator to synthesise inputs on which the averaged
//! client logits are confident, match the clients' batch-norm statistics and
//! expose disagreement with the global model, then distils the ensemble into
//! the global model on those inputs.

pub mod data;
pub mod distillation;
pub mod ensemble;
pub mod error;
pub mod generator_stage;
pub mod harness;
pub mod local;
pub mod losses;
pub mod models;
pub mod partition;

pub use data::{load_dataset, load_dataset_from, DatasetHandle, DatasetName, DatasetView, Split};
pub use distillation::{
    distill_loss, distill_loss_and_grad, fedsyn_epoch, run_fedsyn, run_multiround, EpochMetrics, EpochRecord,
    FedSynConfig, FedSynState, RunResult,
};
pub use ensemble::{
    average_logits, average_logits_weighted, evaluate, evaluate_batched, fedavg_aggregate, EnsembleBundle,
    EnsembleClassifier, LogitWeighting,
};
pub use error::{FedSynError, Result};
pub use generator_stage::{
    bn_loss, ce_gen_loss, div_loss, gen_loss, generator_inner_loop, sample_noise_and_labels, BnNorm, GenLossOptions,
    GenLossTerms, GenLossWeights, SyntheticBatch,
};
pub use local::{client_inits, local_update, train_all_clients, Execution, LocalTrainConfig};
pub use models::{
    build_model, generate, ArchId, BatchStatsCapture, Classifier, ClientModel, GeneratorModel, GeneratorSpec, ModelSpec,
};
pub use partition::{dirichlet_partition, partition_summary, PartitionPlan};
