// Trains five clients on label-skewed shards of an MNIST subset and reports
// how each one does on the full test set.
//
// cargo run --release --example local_training
use anyhow::Result;
use fedsyn::{
    dirichlet_partition, evaluate, load_dataset, train_all_clients, ArchId, Execution, LocalTrainConfig, ModelSpec,
    Split,
};

const PER_CLASS: usize = 300;
const CLIENTS: usize = 5;

fn main() -> Result<()> {
    env_logger::init();
    let train = load_dataset("mnist", Split::Train)?.take_per_class(PER_CLASS);
    let test = load_dataset("mnist", Split::Test)?;
    let plan = dirichlet_partition(&train, 0.5, CLIENTS, 0)?;
    let spec = ModelSpec::new(ArchId::Cnn1, 10, [28, 28, 1]).with_width_divisor(4);
    let cfg = LocalTrainConfig { epochs: 5, ..Default::default() };
    let bundle = train_all_clients(&plan, &train, &vec![spec; CLIENTS], &cfg, Execution::Parallel)?;
    for (k, (c, n)) in bundle.clients().iter().zip(bundle.sizes()).enumerate() {
        println!("client {k}: {n:>5} examples, test accuracy {:.4}", evaluate(c, &test)?);
    }
    bundle.save(std::path::Path::new("target/example-bundle"))?;
    println!("bundle written to target/example-bundle");
    Ok(())
}
