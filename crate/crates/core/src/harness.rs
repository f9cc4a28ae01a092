//! Experiment matrices over (α, m, method, seed), a JSONL results store and
//! report rendering.
//!
//! A matrix is described by an [`ExperimentSpec`], usually read from a TOML
//! file that names a preset and overrides some of its fields:
//!
//! ```toml
//! preset = "desk-mnist"
//! alphas = [0.1, 0.5]
//! methods = ["fedavg", "fedsyn"]
//! repeats = 1
//!
//! [fedsyn]
//! epochs = 20
//! ```
//!
//! Every (cell, seed) pair becomes one [`RunRecord`] in the store, keyed by a
//! SHA-256 over its full configuration. Rerunning a matrix skips keys that
//! already have a successful record.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_dataset, DatasetHandle, DatasetName, Split};
use crate::distillation::{run_fedsyn, run_multiround, FedSynConfig};
use crate::ensemble::{evaluate, fedavg_aggregate, EnsembleBundle};
use crate::error::{io_err, FedSynError, Result};
use crate::local::{train_all_clients, Execution, LocalTrainConfig};
use crate::models::{ArchId, ModelSpec};
use crate::partition::dirichlet_partition;

/// What the server does with the uploaded bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Size-weighted parameter average (homogeneous bundles only).
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedsyn")]
    FedSyn,
    /// Generator trained on the class-conditional term alone.
    #[serde(rename = "fedsyn_ce_only")]
    FedSynCeOnly,
    #[serde(rename = "fedsyn_no_bn")]
    FedSynNoBn,
    #[serde(rename = "fedsyn_no_div")]
    FedSynNoDiv,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::FedAvg, Method::FedSyn, Method::FedSynCeOnly, Method::FedSynNoBn, Method::FedSynNoDiv];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::FedSyn => "fedsyn",
            Method::FedSynCeOnly => "fedsyn_ce_only",
            Method::FedSynNoBn => "fedsyn_no_bn",
            Method::FedSynNoDiv => "fedsyn_no_div",
        }
    }

    /// The distillation config this method runs with, or `None` for FedAvg.
    /// Ablations only zero loss weights; they share every other code path.
    pub fn configure(&self, base: &FedSynConfig) -> Option<FedSynConfig> {
        let mut cfg = base.clone();
        match self {
            Method::FedAvg => return None,
            Method::FedSyn => {}
            Method::FedSynCeOnly => {
                cfg.lambda1 = 0.0;
                cfg.lambda2 = 0.0;
            }
            Method::FedSynNoBn => cfg.lambda1 = 0.0,
            Method::FedSynNoDiv => cfg.lambda2 = 0.0,
        }
        Some(cfg)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = FedSynError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| FedSynError::InvalidArgument(format!("unknown method `{s}`")))
    }
}

/// One architecture for every client, or an explicit per-client list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchAssignment {
    Homogeneous(ArchId),
    Heterogeneous(Vec<ArchId>),
}

impl ArchAssignment {
    pub fn for_clients(&self, m: usize) -> Result<Vec<ArchId>> {
        match self {
            ArchAssignment::Homogeneous(a) => Ok(vec![*a; m]),
            ArchAssignment::Heterogeneous(list) if list.len() == m => Ok(list.clone()),
            ArchAssignment::Heterogeneous(list) => Err(FedSynError::InvalidArgument(format!(
                "{} architectures listed for {m} clients",
                list.len()
            ))),
        }
    }
}

/// A grid of experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: String,
    pub alphas: Vec<f64>,
    /// Client counts `m`.
    pub clients: Vec<usize>,
    pub archs: ArchAssignment,
    /// Architecture of the distilled global model.
    pub student: ArchId,
    /// Channel-width divisor applied to every client and the student.
    pub width_divisor: usize,
    pub methods: Vec<Method>,
    pub local: LocalTrainConfig,
    pub fedsyn: FedSynConfig,
    pub repeats: usize,
    pub seed_base: u64,
}

/// Names accepted by [`ExperimentSpec::preset`].
pub const PRESETS: [&str; 6] = ["desk-mnist", "desk-fmnist", "desk-cifar10", "paper-mnist", "paper-fmnist", "paper-cifar10"];

const HETERO_ZOO: [ArchId; 5] = [ArchId::Resnet18, ArchId::Cnn1, ArchId::Cnn2, ArchId::Wrn16_1, ArchId::Wrn40_1];

impl ExperimentSpec {
    /// Built-in configurations. `desk-*` presets shrink widths and budgets
    /// so a full matrix fits on a CPU; `paper-*` presets use full widths and
    /// the long training schedules.
    pub fn preset(name: &str) -> Result<Self> {
        let desk_local = LocalTrainConfig { epochs: 20, ..LocalTrainConfig::default() };
        let desk_fedsyn = FedSynConfig {
            epochs: 50,
            gen_steps: 5,
            distill_steps: 10,
            gen_widths: [32, 16],
            ..FedSynConfig::default()
        };
        let desk = |dataset: &str| ExperimentSpec {
            dataset: dataset.into(),
            alphas: vec![0.5],
            clients: vec![5],
            archs: ArchAssignment::Homogeneous(ArchId::Cnn1),
            student: ArchId::Cnn1,
            width_divisor: 4,
            methods: vec![Method::FedAvg, Method::FedSyn, Method::FedSynCeOnly],
            local: desk_local.clone(),
            fedsyn: desk_fedsyn.clone(),
            repeats: 3,
            seed_base: 0,
        };
        let paper = |dataset: &str, arch: ArchId| ExperimentSpec {
            dataset: dataset.into(),
            alphas: vec![0.1, 0.3, 0.5],
            clients: vec![5],
            archs: ArchAssignment::Homogeneous(arch),
            student: arch,
            width_divisor: 1,
            methods: Method::ALL.to_vec(),
            local: LocalTrainConfig::default(),
            fedsyn: FedSynConfig::default(),
            repeats: 3,
            seed_base: 0,
        };
        Ok(match name {
            "desk-mnist" => desk("mnist"),
            "desk-fmnist" => desk("fashion-mnist"),
            "desk-cifar10" => ExperimentSpec {
                archs: ArchAssignment::Heterogeneous(HETERO_ZOO.to_vec()),
                student: ArchId::Resnet18,
                methods: vec![Method::FedSyn],
                local: LocalTrainConfig { epochs: 10, ..desk_local.clone() },
                fedsyn: FedSynConfig { epochs: 80, gen_widths: [64, 32], ..desk_fedsyn.clone() },
                repeats: 1,
                ..desk("cifar10")
            },
            "paper-mnist" => paper("mnist", ArchId::Cnn1),
            "paper-fmnist" => paper("fashion-mnist", ArchId::Cnn1),
            "paper-cifar10" => ExperimentSpec {
                archs: ArchAssignment::Heterogeneous(HETERO_ZOO.to_vec()),
                methods: vec![Method::FedSyn],
                ..paper("cifar10", ArchId::Resnet18)
            },
            other => {
                return Err(FedSynError::InvalidArgument(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    /// Parses a TOML spec. A top-level `preset = "..."` key supplies the
    /// defaults; every other key overrides it, recursing into tables.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let fmt = |reason: String| FedSynError::Format { what: "experiment spec".into(), reason };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| fmt(e.to_string()))?;
        let spec_value = match table.remove("preset") {
            Some(toml::Value::String(name)) => {
                let mut base = toml::Value::try_from(Self::preset(&name)?).map_err(|e| fmt(e.to_string()))?;
                merge_toml(&mut base, toml::Value::Table(table));
                base
            }
            Some(other) => return Err(fmt(format!("`preset` must be a string, got {other}"))),
            None => toml::Value::Table(table),
        };
        let spec: Self = spec_value.try_into().map_err(|e: toml::de::Error| fmt(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("experiment spec serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FedSynError::InvalidArgument(msg));
        self.dataset.parse::<DatasetName>()?;
        if self.alphas.is_empty() || self.clients.is_empty() || self.methods.is_empty() {
            return bad("alpha, client and method grids must be nonempty".into());
        }
        if let Some(a) = self.alphas.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return bad(format!("alpha must be positive, got {a}"));
        }
        if self.clients.contains(&0) {
            return bad("client counts must be positive".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.width_divisor == 0 {
            return bad("width_divisor must be positive".into());
        }
        for &m in &self.clients {
            self.archs.for_clients(m)?;
        }
        self.local.validate()?;
        self.fedsyn.validate()
    }

    /// Every (α, m, seed, method) cell in execution order. Cells sharing
    /// (α, m, seed) are adjacent so their client bundle is trained once.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let dataset: DatasetName = self.dataset.parse()?;
        let mut cells = Vec::new();
        for &alpha in &self.alphas {
            for &m in &self.clients {
                let archs = self.archs.for_clients(m)?;
                for r in 0..self.repeats {
                    let seed = self.seed_base + r as u64;
                    for &method in &self.methods {
                        cells.push(Cell {
                            dataset: dataset.as_str().into(),
                            alpha,
                            clients: m,
                            archs: archs.clone(),
                            student: self.student,
                            width_divisor: self.width_divisor,
                            method,
                            local: LocalTrainConfig { seed, ..self.local.clone() },
                            fedsyn: FedSynConfig { seed, ..self.fedsyn.clone() },
                            seed,
                        });
                    }
                }
            }
        }
        Ok(cells)
    }
}

/// Settings file for single end-to-end runs (`[local]` and `[fedsyn]`
/// tables, both optional).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub local: LocalTrainConfig,
    pub fedsyn: FedSynConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| FedSynError::Format { what: "run config".into(), reason: e.to_string() })?;
        cfg.local.validate()?;
        cfg.fedsyn.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Fully resolved coordinates of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub dataset: String,
    pub alpha: f64,
    pub clients: usize,
    pub archs: Vec<ArchId>,
    pub student: ArchId,
    pub width_divisor: usize,
    pub method: Method,
    pub local: LocalTrainConfig,
    pub fedsyn: FedSynConfig,
    pub seed: u64,
}

impl Cell {
    /// Store key: SHA-256 of the canonical JSON encoding.
    pub fn key(&self) -> String {
        hash_json(self)
    }

    /// Key of the cell with the seed blanked out; runs that differ only in
    /// seed share it and are aggregated into one report row.
    pub fn group_key(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.local.seed = 0;
        c.fedsyn.seed = 0;
        hash_json(&c)
    }

    pub fn arch_label(&self) -> String {
        let first = self.archs[0];
        if self.archs.iter().all(|a| *a == first) {
            first.as_str().to_string()
        } else {
            self.archs.iter().map(|a| a.as_str()).collect::<Vec<_>>().join("+")
        }
    }

    fn model_spec(&self, arch: ArchId, data: &DatasetHandle) -> ModelSpec {
        ModelSpec::new(arch, data.num_classes(), data.image_shape()).with_width_divisor(self.width_divisor)
    }

    fn client_specs(&self, data: &DatasetHandle) -> Vec<ModelSpec> {
        self.archs.iter().map(|&a| self.model_spec(a, data)).collect()
    }

    /// Same client bundle as `other`: identical partition and local training.
    fn shares_bundle_with(&self, other: &Cell) -> bool {
        self.dataset == other.dataset
            && self.alpha.to_bits() == other.alpha.to_bits()
            && self.clients == other.clients
            && self.archs == other.archs
            && self.width_divisor == other.width_divisor
            && self.local == other.local
    }
}

fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("cell serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Outcome of one cell, as stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub key: String,
    pub group: String,
    pub cell: Cell,
    /// Test accuracy of the server model. Absent when the run failed.
    pub accuracy: Option<f64>,
    /// Test accuracy of each uploaded client model (one-shot runs).
    #[serde(default)]
    pub client_accuracies: Vec<f64>,
    /// `(epoch, accuracy)` evaluation points of the distillation run.
    #[serde(default)]
    pub curve: Vec<(usize, f64)>,
    pub runtime_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.error.is_none() && self.accuracy.is_some()
    }
}

/// Append-only JSONL file of [`RunRecord`]s.
#[derive(Clone, Debug)]
pub struct ResultsStore {
    path: PathBuf,
}

impl ResultsStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// All records in file order; a missing file is an empty store.
    pub fn records(&self) -> Result<Vec<RunRecord>> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&self.path)(e)),
        };
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&self.path))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| FedSynError::Format {
                what: format!("{} line {}", self.path.display(), i + 1),
                reason: e.to_string(),
            })?);
        }
        Ok(out)
    }

    /// Keys that already have a successful record.
    pub fn completed_keys(&self) -> Result<HashSet<String>> {
        Ok(self.records()?.into_iter().filter(RunRecord::succeeded).map(|r| r.key).collect())
    }

    /// Appends one line while holding an exclusive lock on the file, so
    /// several processes can share a store.
    pub fn append(&self, record: &RunRecord) -> Result<()> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut file =
            OpenOptions::new().create(true).append(true).open(&self.path).map_err(io_err(&self.path))?;
        file.lock().map_err(io_err(&self.path))?;
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        let res = file.write_all(line.as_bytes()).and_then(|_| file.flush());
        file.unlock().map_err(io_err(&self.path))?;
        res.map_err(io_err(&self.path))
    }
}

/// Aggregate over the seeds of one cell group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub method: Method,
    pub alpha: f64,
    pub clients: usize,
    pub archs: String,
    pub student: ArchId,
    pub rounds: usize,
    pub repeats: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation; present iff `repeats > 1`.
    pub std_accuracy: Option<f64>,
    pub mean_client_accuracy: Option<f64>,
    pub mean_runtime_s: f64,
    pub failures: usize,
    pub group: String,
}

/// Groups successful records by configuration (ignoring the seed) into
/// rows, in order of first appearance. Groups whose runs all failed are
/// left out.
pub fn summarize(records: &[RunRecord]) -> Vec<ReportRow> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        if !groups.contains_key(&r.group) {
            order.push(r.group.clone());
        }
        groups.entry(r.group.clone()).or_default().push(r);
    }
    let mut rows = Vec::new();
    for g in order {
        let all = &groups[&g];
        // Latest successful record per seed; reruns with --force append.
        let mut by_seed: BTreeMap<u64, &RunRecord> = BTreeMap::new();
        for r in all.iter().filter(|r| r.succeeded()) {
            by_seed.insert(r.cell.seed, r);
        }
        if by_seed.is_empty() {
            continue;
        }
        let ok: Vec<&RunRecord> = by_seed.into_values().collect();
        let failures = all.len() - all.iter().filter(|r| r.succeeded()).count();
        let accs: Vec<f64> = ok.iter().map(|r| r.accuracy.expect("succeeded")).collect();
        let (mean, std) = mean_std(&accs);
        let client_means: Vec<f64> = ok
            .iter()
            .filter(|r| !r.client_accuracies.is_empty())
            .map(|r| r.client_accuracies.iter().sum::<f64>() / r.client_accuracies.len() as f64)
            .collect();
        let first = &ok[0].cell;
        rows.push(ReportRow {
            dataset: first.dataset.clone(),
            method: first.method,
            alpha: first.alpha,
            clients: first.clients,
            archs: first.arch_label(),
            student: first.student,
            rounds: if first.method == Method::FedAvg { 1 } else { first.fedsyn.rounds },
            repeats: ok.len(),
            mean_accuracy: mean,
            std_accuracy: std,
            mean_client_accuracy: (!client_means.is_empty()).then(|| mean_std(&client_means).0),
            mean_runtime_s: ok.iter().map(|r| r.runtime_s).sum::<f64>() / ok.len() as f64,
            failures,
            group: g,
        });
    }
    rows
}

/// Mean and sample standard deviation (`None` for a single value).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MatrixOptions {
    /// Recompute cells that already have a successful record.
    pub force: bool,
    pub execution: Execution,
}

/// Runs `spec` against datasets read from the default data directory.
pub fn run_matrix(spec: &ExperimentSpec, store: &ResultsStore, opts: MatrixOptions) -> Result<Vec<ReportRow>> {
    spec.validate()?;
    let train = load_dataset(&spec.dataset, Split::Train)?;
    let test = load_dataset(&spec.dataset, Split::Test)?;
    run_matrix_with(spec, &train, &test, store, opts)
}

/// Runs every missing cell of `spec` on the given splits, appending one
/// record per cell, and returns the report rows of the spec's groups.
/// A failing cell is recorded with its error and does not stop the matrix.
pub fn run_matrix_with(
    spec: &ExperimentSpec,
    train: &DatasetHandle,
    test: &DatasetHandle,
    store: &ResultsStore,
    opts: MatrixOptions,
) -> Result<Vec<ReportRow>> {
    spec.validate()?;
    let cells = spec.cells()?;
    let done = store.completed_keys()?;
    let mut bundle: Option<(Cell, BuiltBundle)> = None;
    for cell in &cells {
        let key = cell.key();
        if done.contains(&key) && !opts.force {
            log::info!("skip {} {} alpha={} m={} seed={}", &key[..12], cell.method, cell.alpha, cell.clients, cell.seed);
            continue;
        }
        log::info!("run {} {} alpha={} m={} seed={}", &key[..12], cell.method, cell.alpha, cell.clients, cell.seed);
        let t0 = Instant::now();
        let needs_bundle = cell.method == Method::FedAvg || cell.fedsyn.rounds == 1;
        if needs_bundle && !bundle.as_ref().is_some_and(|(c, _)| c.shares_bundle_with(cell)) {
            let built = train_bundle(cell, train, test, opts.execution).map_err(|e| e.to_string());
            bundle = Some((cell.clone(), built));
        }
        let outcome = match (needs_bundle, &bundle) {
            (true, Some((_, Err(e)))) => Err(e.clone()),
            (true, Some((_, Ok((b, accs))))) => execute_one_shot(cell, b, accs, train, test),
            _ => execute_multiround(cell, train, test),
        };
        let runtime_s = t0.elapsed().as_secs_f64();
        let record = match outcome {
            Ok((accuracy, client_accuracies, curve)) => RunRecord {
                key,
                group: cell.group_key(),
                cell: cell.clone(),
                accuracy: Some(accuracy),
                client_accuracies,
                curve,
                runtime_s,
                error: None,
            },
            Err(e) => {
                log::warn!("cell {} failed: {e}", &key[..12]);
                RunRecord {
                    key,
                    group: cell.group_key(),
                    cell: cell.clone(),
                    accuracy: None,
                    client_accuracies: Vec::new(),
                    curve: Vec::new(),
                    runtime_s,
                    error: Some(e),
                }
            }
        };
        store.append(&record)?;
    }
    let groups: HashSet<String> = cells.iter().map(Cell::group_key).collect();
    let records: Vec<RunRecord> = store.records()?.into_iter().filter(|r| groups.contains(&r.group)).collect();
    Ok(summarize(&records))
}

/// Trained clients with their test accuracies, or why training failed.
type BuiltBundle = std::result::Result<(EnsembleBundle, Vec<f64>), String>;

type Outcome = std::result::Result<(f64, Vec<f64>, Vec<(usize, f64)>), String>;

fn train_bundle(
    cell: &Cell,
    train: &DatasetHandle,
    test: &DatasetHandle,
    exec: Execution,
) -> Result<(EnsembleBundle, Vec<f64>)> {
    let plan = dirichlet_partition(train, cell.alpha, cell.clients, cell.seed)?;
    let bundle = train_all_clients(&plan, train, &cell.client_specs(train), &cell.local, exec)?;
    let accs = bundle.clients().iter().map(|c| evaluate(c, test)).collect::<Result<Vec<_>>>()?;
    Ok((bundle, accs))
}

fn execute_one_shot(
    cell: &Cell,
    bundle: &EnsembleBundle,
    client_accs: &[f64],
    train: &DatasetHandle,
    test: &DatasetHandle,
) -> Outcome {
    let run = || -> Result<(f64, Vec<(usize, f64)>)> {
        match cell.method.configure(&cell.fedsyn) {
            None => Ok((evaluate(&fedavg_aggregate(bundle)?, test)?, Vec::new())),
            Some(cfg) => {
                let r = run_fedsyn(bundle, &cell.model_spec(cell.student, train), &cfg, Some(test))?;
                Ok((r.final_accuracy.expect("test set given"), r.accuracy_curve()))
            }
        }
    };
    run().map(|(acc, curve)| (acc, client_accs.to_vec(), curve)).map_err(|e| e.to_string())
}

fn execute_multiround(cell: &Cell, train: &DatasetHandle, test: &DatasetHandle) -> Outcome {
    let run = || -> Result<(f64, Vec<(usize, f64)>)> {
        let cfg = cell.method.configure(&cell.fedsyn).expect("fedavg cells always use a one-shot bundle");
        let plan = dirichlet_partition(train, cell.alpha, cell.clients, cell.seed)?;
        let r = run_multiround(
            train,
            Some(test),
            &plan,
            &cell.client_specs(train),
            &cell.model_spec(cell.student, train),
            &cell.local,
            &cfg,
        )?;
        Ok((r.final_accuracy.expect("test set given"), r.accuracy_curve()))
    };
    run().map(|(acc, curve)| (acc, Vec::new(), curve)).map_err(|e| e.to_string())
}

/// Files written by [`render_report`].
#[derive(Clone, Debug, Default)]
pub struct ReportFiles {
    /// One CSV and one Markdown table per dataset.
    pub tables: Vec<PathBuf>,
    /// One SVG accuracy curve per run that has evaluation points.
    pub curves: Vec<PathBuf>,
}

/// Writes per-dataset tables (`<dataset>.csv` with one row per
/// [`ReportRow`], `<dataset>.md` laid out methods × α) and accuracy-curve
/// plots under `curves/`.
pub fn render_report(store: &ResultsStore, out: &Path) -> Result<ReportFiles> {
    let records = store.records()?;
    if records.is_empty() {
        return Err(FedSynError::InvalidArgument(format!("results store {} is empty", store.path().display())));
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let rows = summarize(&records);
    let mut files = ReportFiles::default();
    let mut datasets: Vec<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
    datasets.sort_unstable();
    datasets.dedup();
    for ds in datasets {
        let sub: Vec<&ReportRow> = rows.iter().filter(|r| r.dataset == ds).collect();
        let csv_path = out.join(format!("{ds}.csv"));
        write_rows_csv(&csv_path, &sub)?;
        files.tables.push(csv_path);
        let md_path = out.join(format!("{ds}.md"));
        std::fs::write(&md_path, pivot_table(ds, &sub)).map_err(io_err(&md_path))?;
        files.tables.push(md_path);
    }
    let curve_dir = out.join("curves");
    for r in records.iter().filter(|r| r.succeeded() && !r.curve.is_empty()) {
        std::fs::create_dir_all(&curve_dir).map_err(io_err(&curve_dir))?;
        let c = &r.cell;
        let title = format!("{} {} alpha={} m={} seed={}", c.dataset, c.method, c.alpha, c.clients, c.seed);
        let path = curve_dir.join(format!("{}.svg", &r.key[..16]));
        std::fs::write(&path, curve_svg(&title, &r.curve)).map_err(io_err(&path))?;
        files.curves.push(path);
    }
    Ok(files)
}

fn write_rows_csv(path: &Path, rows: &[&ReportRow]) -> Result<()> {
    let csv_err = |e: csv::Error| FedSynError::Format { what: path.display().to_string(), reason: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a table written by [`render_report`].
pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let csv_err = |e: csv::Error| FedSynError::Format { what: path.display().to_string(), reason: e.to_string() };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn pivot_table(dataset: &str, rows: &[&ReportRow]) -> String {
    let mut alphas: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let label = |r: &ReportRow| {
        let mut s = r.method.to_string();
        let same = |f: &dyn Fn(&ReportRow) -> String| rows.iter().all(|o| f(o) == f(rows[0]));
        if !same(&|o| o.clients.to_string()) {
            s += &format!(" m={}", r.clients);
        }
        if !same(&|o| o.archs.clone()) {
            s += &format!(" [{}]", r.archs);
        }
        if !same(&|o| o.rounds.to_string()) {
            s += &format!(" rounds={}", r.rounds);
        }
        s
    };
    let mut labels: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, u64), String> = BTreeMap::new();
    for r in rows {
        let l = label(r);
        if !labels.contains(&l) {
            labels.push(l.clone());
        }
        let v = match r.std_accuracy {
            Some(s) => format!("{:.2} ± {:.2}", 100.0 * r.mean_accuracy, 100.0 * s),
            None => format!("{:.2}", 100.0 * r.mean_accuracy),
        };
        cells.insert((l, r.alpha.to_bits()), v);
    }
    let mut s = format!("## {dataset}\n\n| method |");
    for a in &alphas {
        let _ = write!(s, " α={a} |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(alphas.len()));
    s.push('\n');
    for l in labels {
        let _ = write!(s, "| {l} |");
        for a in &alphas {
            let _ = write!(s, " {} |", cells.get(&(l.clone(), a.to_bits())).map_or("", String::as_str));
        }
        s.push('\n');
    }
    s
}

/// Line plot of `(epoch, accuracy)` points, one marker per point.
pub fn curve_svg(title: &str, points: &[(usize, f64)]) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let max_epoch = points.iter().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
    let xy = |&(e, a): &(usize, f64)| (pad + (w - 2.0 * pad) * e as f64 / max_epoch, h - pad - (h - 2.0 * pad) * a.clamp(0.0, 1.0));
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <title>{}</title>\n\
         <text x=\"{pad}\" y=\"20\" font-size=\"12\">{}</text>\n\
         <line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <text x=\"{x1}\" y=\"{ly}\" font-size=\"10\" text-anchor=\"end\">epoch {max_epoch}</text>\n\
         <text x=\"4\" y=\"{pad}\" font-size=\"10\">1.0</text>\n",
        escape(title),
        escape(title),
        y0 = h - pad,
        x1 = w - pad,
        ly = h - pad + 14.0,
    );
    let coords: Vec<String> = points.iter().map(|p| {
        let (x, y) = xy(p);
        format!("{x:.1},{y:.1}")
    }).collect();
    let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"steelblue\" points=\"{}\"/>", coords.join(" "));
    for p in points {
        let (x, y) = xy(p);
        let _ = writeln!(s, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"2.5\" fill=\"steelblue\"><title>epoch {} acc {:.4}</title></circle>", p.0, p.1);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
