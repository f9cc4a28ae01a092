// A small experiment grid through the harness: results are appended to a
// JSONL store (rerunning skips finished cells) and rendered as tables and
// accuracy curves.
//
// cargo run --release --example matrix_report
use std::path::Path;

use anyhow::Result;
use fedsyn::harness::{render_report, run_matrix_with, ExperimentSpec, MatrixOptions, ResultsStore};
use fedsyn::{load_dataset, Split};

const SPEC: &str = r#"
preset = "desk-mnist"
alphas = [0.1, 0.5]
methods = ["fedavg", "fedsyn"]
repeats = 1

[local]
epochs = 3

[fedsyn]
epochs = 10
"#;

fn main() -> Result<()> {
    let spec = ExperimentSpec::from_toml_str(SPEC)?;
    let train = load_dataset("mnist", Split::Train)?.take_per_class(300);
    let test = load_dataset("mnist", Split::Test)?;
    let store = ResultsStore::new("target/example-matrix/runs.jsonl");
    let rows = run_matrix_with(&spec, &train, &test, &store, MatrixOptions::default())?;
    for r in &rows {
        println!("{:<8} alpha={:<4} {:.4}", r.method, r.alpha, r.mean_accuracy);
    }
    let files = render_report(&store, Path::new("target/example-matrix/report"))?;
    for f in files.tables {
        println!("wrote {}", f.display());
    }
    Ok(())
}
