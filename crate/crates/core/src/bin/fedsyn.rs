//! Command-line front end over the `fedsyn` library.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fedsyn::harness::{render_report, run_matrix, ExperimentSpec, MatrixOptions, ResultsStore, RunConfig};
use fedsyn::{
    dirichlet_partition, evaluate, fedavg_aggregate, load_dataset, partition_summary, run_fedsyn, run_multiround,
    train_all_clients, ArchId, ClientModel, EnsembleBundle, Execution, ModelSpec, PartitionPlan, Split,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "fedsyn", version, about = "One-shot federated learning with data-free distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a dataset's training set over clients with per-class Dirichlet proportions.
    Partition {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        clients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per client of a partition plan and write the bundle.
    TrainClients {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        dataset: String,
        /// One architecture for all clients or a comma-separated list, one per client.
        #[arg(long, value_delimiter = ',')]
        archs: Vec<ArchId>,
        #[arg(long)]
        epochs: usize,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average a homogeneous bundle's parameters weighted by shard size.
    Fedavg {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the accuracy of a checkpoint as a JSON record.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Distill a bundle into a fresh global model.
    Distill {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        student: ArchId,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Partition, local training and distillation end to end.
    Run {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        clients: usize,
        #[arg(long, value_delimiter = ',')]
        archs: Vec<ArchId>,
        /// Global model architecture; defaults to the first client architecture.
        #[arg(long)]
        student: Option<ArchId>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute every missing cell of an experiment spec.
    Matrix {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Recompute cells that already have a result.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        serial: bool,
    },
    /// Render tables and accuracy curves from a results store.
    Report {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Divide every channel width by this (minimum 4 channels per layer).
    #[arg(long, default_value_t = 1)]
    width_divisor: usize,
    /// Train clients one after another instead of in parallel.
    #[arg(long)]
    serial: bool,
}

impl ModelArgs {
    fn execution(&self) -> Execution {
        if self.serial {
            Execution::Serial
        } else {
            Execution::Parallel
        }
    }
}

fn archs_for(archs: &[ArchId], m: usize) -> anyhow::Result<Vec<ArchId>> {
    match archs.len() {
        1 => Ok(vec![archs[0]; m]),
        n if n == m => Ok(archs.to_vec()),
        n => bail!("{n} architectures given for {m} clients"),
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Partition { dataset, alpha, clients, seed, out } => {
            let data = load_dataset(&dataset, Split::Train)?;
            let plan = dirichlet_partition(&data, alpha, clients, seed)?;
            plan.save(&out)?;
            for (k, hist) in partition_summary(&plan, &data)?.iter().enumerate() {
                println!("client {k}: {} examples, per class {hist:?}", plan.assignments[k].len());
            }
        }
        Command::TrainClients { plan, dataset, archs, epochs, batch_size, lr, seed, common, out } => {
            let plan = PartitionPlan::load(&plan)?;
            let data = load_dataset(&dataset, Split::Train)?;
            let specs: Vec<ModelSpec> = archs_for(&archs, plan.num_clients)?
                .into_iter()
                .map(|a| {
                    ModelSpec::new(a, data.num_classes(), data.image_shape()).with_width_divisor(common.width_divisor)
                })
                .collect();
            let cfg = fedsyn::LocalTrainConfig { epochs, batch_size, learning_rate: lr, seed, ..Default::default() };
            let bundle = train_all_clients(&plan, &data, &specs, &cfg, common.execution())?;
            bundle.save(&out)?;
            println!("wrote {} client models to {}", bundle.len(), out.display());
        }
        Command::Fedavg { bundle, out } => {
            let bundle = EnsembleBundle::load(&bundle)?;
            fedavg_aggregate(&bundle)?.save(&out, bundle.dataset())?;
            println!("wrote {}", out.display());
        }
        Command::Eval { model, dataset, split } => {
            let (model, trained_on) = ClientModel::load(&model)?;
            let data = load_dataset(&dataset, split)?;
            let acc = evaluate(&model, &data)?;
            let rec = json!({
                "arch": model.arch().as_str(),
                "trained_on": trained_on,
                "dataset": data.name(),
                "split": split.to_string(),
                "examples": data.len(),
                "accuracy": acc,
            });
            println!("{rec}");
        }
        Command::Distill { bundle, student, config, common, out } => {
            let cfg = load_config(config.as_deref())?;
            let bundle = EnsembleBundle::load(&bundle)?;
            let test = load_dataset(bundle.dataset(), Split::Test).ok();
            if test.is_none() {
                log::warn!("no test split for {}; accuracy will not be tracked", bundle.dataset());
            }
            let spec = ModelSpec::new(student, bundle.num_classes(), bundle.input_shape())
                .with_width_divisor(common.width_divisor);
            let result = run_fedsyn(&bundle, &spec, &cfg.fedsyn, test.as_ref())?;
            result.save(&out, bundle.dataset())?;
            println!("final accuracy {:?}; wrote {}", result.final_accuracy, out.display());
        }
        Command::Run { dataset, alpha, clients, archs, student, config, seed, common, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.local.seed = s;
                cfg.fedsyn.seed = s;
            }
            let train = load_dataset(&dataset, Split::Train)?;
            let test = load_dataset(&dataset, Split::Test)?;
            let archs = archs_for(&archs, clients)?;
            let spec_of = |a: ArchId| {
                ModelSpec::new(a, train.num_classes(), train.image_shape()).with_width_divisor(common.width_divisor)
            };
            let specs: Vec<ModelSpec> = archs.iter().map(|&a| spec_of(a)).collect();
            let student = spec_of(student.unwrap_or(archs[0]));
            let plan = dirichlet_partition(&train, alpha, clients, cfg.fedsyn.seed)?;
            let result = if cfg.fedsyn.rounds > 1 {
                run_multiround(&train, Some(&test), &plan, &specs, &student, &cfg.local, &cfg.fedsyn)?
            } else {
                let bundle = train_all_clients(&plan, &train, &specs, &cfg.local, common.execution())?;
                for (k, c) in bundle.clients().iter().enumerate() {
                    println!("client {k} ({}) accuracy {:.4}", c.arch().as_str(), evaluate(c, &test)?);
                }
                if bundle.is_homogeneous() {
                    println!("fedavg accuracy {:.4}", evaluate(&fedavg_aggregate(&bundle)?, &test)?);
                }
                run_fedsyn(&bundle, &student, &cfg.fedsyn, Some(&test))?
            };
            println!("fedsyn accuracy {:.4}", result.final_accuracy.context("no accuracy recorded")?);
            if let Some(out) = out {
                result.save(&out, &dataset)?;
            }
        }
        Command::Matrix { spec, store, force, serial } => {
            let spec = ExperimentSpec::load(&spec)?;
            let execution = if serial { Execution::Serial } else { Execution::Parallel };
            let rows = run_matrix(&spec, &ResultsStore::new(store), MatrixOptions { force, execution })?;
            for r in rows {
                let std = r.std_accuracy.map(|s| format!(" ± {s:.4}")).unwrap_or_default();
                println!("{} {} alpha={} m={} [{}]: {:.4}{std} (n={})", r.dataset, r.method, r.alpha, r.clients, r.archs, r.mean_accuracy, r.repeats);
            }
        }
        Command::Report { store, out } => {
            let files = render_report(&ResultsStore::new(store), &out)?;
            for t in &files.tables {
                println!("{}", t.display());
            }
            println!("{} curve plots in {}", files.curves.len(), out.join("curves").display());
        }
    }
    Ok(())
}
