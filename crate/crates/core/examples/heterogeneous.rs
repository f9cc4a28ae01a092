// Clients with five different architectures. Parameter averaging is not
// defined for them, but distillation only needs their logits.
//
// cargo run --release --example heterogeneous
use anyhow::Result;
use fedsyn::{
    dirichlet_partition, evaluate, fedavg_aggregate, load_dataset, run_fedsyn, train_all_clients, ArchId, Execution,
    FedSynConfig, LocalTrainConfig, ModelSpec, Split,
};

fn main() -> Result<()> {
    let train = load_dataset("mnist", Split::Train)?.take_per_class(200);
    let test = load_dataset("mnist", Split::Test)?.take_per_class(200);
    let specs: Vec<ModelSpec> =
        ArchId::ZOO.iter().map(|&a| ModelSpec::new(a, 10, [28, 28, 1]).with_width_divisor(4)).collect();
    let plan = dirichlet_partition(&train, 0.5, specs.len(), 0)?;
    let local = LocalTrainConfig { epochs: 5, ..Default::default() };
    let bundle = train_all_clients(&plan, &train, &specs, &local, Execution::Parallel)?;
    for c in bundle.clients() {
        println!("{:>9}: {:.4}", c.arch(), evaluate(c, &test)?);
    }
    if let Err(e) = fedavg_aggregate(&bundle) {
        println!("fedavg: {e}");
    }
    let cfg = FedSynConfig { epochs: 10, gen_steps: 5, distill_steps: 5, gen_widths: [32, 16], ..Default::default() };
    let run = run_fedsyn(&bundle, &specs[1], &cfg, Some(&test))?;
    println!("global cnn1 student: {:.4}", run.final_accuracy.unwrap());
    Ok(())
}
