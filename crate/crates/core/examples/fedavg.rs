// One-shot FedAvg: average the parameters of independently trained clients
// once, and compare with the logit ensemble of the same clients.
//
// cargo run --release --example fedavg
use anyhow::Result;
use fedsyn::{
    dirichlet_partition, evaluate, fedavg_aggregate, load_dataset, train_all_clients, ArchId, EnsembleClassifier,
    Execution, LocalTrainConfig, LogitWeighting, ModelSpec, Split,
};

fn main() -> Result<()> {
    let train = load_dataset("mnist", Split::Train)?.take_per_class(300);
    let test = load_dataset("mnist", Split::Test)?;
    let plan = dirichlet_partition(&train, 0.5, 5, 0)?;
    let spec = ModelSpec::new(ArchId::Cnn1, 10, [28, 28, 1]).with_width_divisor(4);
    let cfg = LocalTrainConfig { epochs: 5, ..Default::default() };
    let bundle = train_all_clients(&plan, &train, &vec![spec; 5], &cfg, Execution::Parallel)?;

    let global = fedavg_aggregate(&bundle)?;
    let ensemble = EnsembleClassifier { bundle: &bundle, weighting: LogitWeighting::Uniform };
    println!("fedavg   {:.4}", evaluate(&global, &test)?);
    println!("ensemble {:.4}", evaluate(&ensemble, &test)?);
    Ok(())
}
