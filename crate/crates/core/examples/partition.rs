// Splits MNIST across clients with Dirichlet label skew and prints the
// per-client class counts for a few concentrations.
//
// cargo run --release --example partition
use anyhow::Result;
use fedsyn::{dirichlet_partition, load_dataset, partition_summary, Split};

const CLIENTS: usize = 5;
const SEED: u64 = 0;

fn main() -> Result<()> {
    let train = load_dataset("mnist", Split::Train)?;
    for alpha in [0.1, 0.5, 100.0] {
        let plan = dirichlet_partition(&train, alpha, CLIENTS, SEED)?;
        println!("alpha = {alpha}");
        for (k, row) in partition_summary(&plan, &train)?.iter().enumerate() {
            let n: usize = row.iter().sum();
            let top = *row.iter().max().unwrap() as f64 / n as f64;
            println!("  client {k}: {n:>6} examples, largest class {:>5.1}%  {row:?}", 100.0 * top);
        }
    }
    Ok(())
}
