// The full one-shot pipeline: partition, local training, then data-free
// distillation of the client ensemble into a global model on the server.
//
// cargo run --release --example fedsyn_one_shot
use anyhow::Result;
use fedsyn::{
    dirichlet_partition, evaluate, fedavg_aggregate, load_dataset, run_fedsyn, train_all_clients, ArchId, Execution,
    FedSynConfig, LocalTrainConfig, ModelSpec, Split,
};

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let train = load_dataset("mnist", Split::Train)?.take_per_class(500);
    let test = load_dataset("mnist", Split::Test)?;
    let plan = dirichlet_partition(&train, 0.5, 5, 0)?;
    let spec = ModelSpec::new(ArchId::Cnn1, 10, [28, 28, 1]).with_width_divisor(4);
    let local = LocalTrainConfig { epochs: 10, ..Default::default() };
    let bundle = train_all_clients(&plan, &train, &vec![spec.clone(); 5], &local, Execution::Parallel)?;

    let cfg = FedSynConfig { epochs: 20, gen_steps: 5, distill_steps: 10, gen_widths: [32, 16], ..Default::default() };
    let run = run_fedsyn(&bundle, &spec, &cfg, Some(&test))?;
    for (epoch, acc) in run.accuracy_curve() {
        println!("epoch {epoch:>3}: {acc:.4}");
    }
    println!("fedavg {:.4}", evaluate(&fedavg_aggregate(&bundle)?, &test)?);
    println!("fedsyn {:.4}", run.final_accuracy.unwrap());
    Ok(())
}
