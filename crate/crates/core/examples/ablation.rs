// Distils one client bundle four times, switching off the batch-norm and
// disagreement terms of the generator objective in turn.
//
// cargo run --release --example ablation
use anyhow::Result;
use fedsyn::harness::Method;
use fedsyn::{
    dirichlet_partition, load_dataset, run_fedsyn, train_all_clients, ArchId, Execution, FedSynConfig,
    LocalTrainConfig, ModelSpec, Split,
};

fn main() -> Result<()> {
    let train = load_dataset("mnist", Split::Train)?.take_per_class(300);
    let test = load_dataset("mnist", Split::Test)?;
    let plan = dirichlet_partition(&train, 0.5, 5, 0)?;
    let spec = ModelSpec::new(ArchId::Cnn1, 10, [28, 28, 1]).with_width_divisor(4);
    let local = LocalTrainConfig { epochs: 5, ..Default::default() };
    let bundle = train_all_clients(&plan, &train, &vec![spec.clone(); 5], &local, Execution::Parallel)?;

    let base = FedSynConfig { epochs: 15, gen_steps: 5, distill_steps: 5, gen_widths: [32, 16], ..Default::default() };
    for method in [Method::FedSyn, Method::FedSynNoBn, Method::FedSynNoDiv, Method::FedSynCeOnly] {
        let cfg = method.configure(&base).expect("distillation method");
        let run = run_fedsyn(&bundle, &spec, &cfg, Some(&test))?;
        println!("{:<16} lambda1={} lambda2={}: {:.4}", method, cfg.lambda1, cfg.lambda2, run.final_accuracy.unwrap());
    }
    Ok(())
}
