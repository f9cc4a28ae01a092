// Several communication rounds: clients restart from the distilled global
// model each round while the server keeps its student and generator.
//
// cargo run --release --example multi_round
use anyhow::Result;
use fedsyn::{dirichlet_partition, load_dataset, run_multiround, ArchId, FedSynConfig, LocalTrainConfig, ModelSpec, Split};

const ROUNDS: usize = 3;

fn main() -> Result<()> {
    let train = load_dataset("mnist", Split::Train)?.take_per_class(300);
    let test = load_dataset("mnist", Split::Test)?;
    let plan = dirichlet_partition(&train, 0.5, 5, 0)?;
    let spec = ModelSpec::new(ArchId::Cnn1, 10, [28, 28, 1]).with_width_divisor(4);
    let local = LocalTrainConfig { epochs: 3, ..Default::default() };
    let cfg = FedSynConfig {
        rounds: ROUNDS,
        epochs: 10,
        gen_steps: 5,
        distill_steps: 5,
        gen_widths: [32, 16],
        eval_every: 10,
        ..Default::default()
    };
    let run = run_multiround(&train, Some(&test), &plan, &vec![spec.clone(); 5], &spec, &local, &cfg)?;
    for (epoch, acc) in run.accuracy_curve() {
        println!("round {}: {acc:.4}", epoch / cfg.epochs);
    }
    Ok(())
}
