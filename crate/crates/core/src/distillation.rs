//! Distilling the ensemble into the global model, and the full training loop.

use std::path::Path;
use std::time::Instant;

use fedsyn_nn::{apply_bn_updates, Adam, BackwardOptions, ForwardOptions, Grads, Mode, Sgd, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetHandle;
use crate::ensemble::{average_logits_weighted, evaluate, EnsembleBundle, LogitWeighting};
use crate::error::{io_err, FedSynError, Result};
use crate::generator_stage::{
    generator_inner_loop, sample_noise_and_labels, BnNorm, GenLossOptions, GenLossTerms, GenLossWeights,
};
use crate::local::{client_inits, train_clients, Execution, LocalTrainConfig, LossRegistry};
use crate::losses;
use crate::models::{build_model, generate, ClientModel, GeneratorModel, GeneratorSpec, ModelSpec};
use crate::partition::PartitionPlan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedSynConfig {
    /// Distillation epochs `T`.
    pub epochs: usize,
    /// Generator updates per epoch `T_G`.
    pub gen_steps: usize,
    /// Synthetic batch size `b`.
    pub batch_size: usize,
    pub lr_student: f32,
    pub momentum_student: f32,
    pub lr_gen: f32,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Student updates per epoch `T_S`.
    pub distill_steps: usize,
    /// Communication rounds `T_c` (multi-round runs only).
    pub rounds: usize,
    pub seed: u64,
    pub noise_dim: usize,
    pub gen_widths: [usize; 2],
    pub kl_temperature: f64,
    pub bn_norm: BnNorm,
    pub logit_weighting: LogitWeighting,
    /// Draw new noise for the student updates instead of reusing the
    /// generator's batch.
    pub fresh_z: bool,
    /// Evaluate the student every this many epochs (and after the last one).
    pub eval_every: usize,
    /// Leave wall-clock times out of the per-epoch trace.
    pub deterministic_trace: bool,
}

impl Default for FedSynConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            gen_steps: 30,
            batch_size: 128,
            lr_student: 0.01,
            momentum_student: 0.9,
            lr_gen: 0.001,
            lambda1: 1.0,
            lambda2: 0.5,
            distill_steps: 1,
            rounds: 1,
            seed: 0,
            noise_dim: 100,
            gen_widths: [128, 64],
            kl_temperature: 1.0,
            bn_norm: BnNorm::L2,
            logit_weighting: LogitWeighting::Uniform,
            fresh_z: false,
            eval_every: 5,
            deterministic_trace: false,
        }
    }
}

impl FedSynConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FedSynError::InvalidArgument(m));
        if self.batch_size == 0 || self.noise_dim == 0 {
            return bad("batch size and noise dimension must be positive".into());
        }
        if self.distill_steps == 0 {
            return bad("distill_steps must be at least 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if !(self.lr_student >= 0.0 && self.lr_gen >= 0.0 && self.lr_student.is_finite() && self.lr_gen.is_finite()) {
            return bad("learning rates must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum_student) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum_student));
        }
        if !(self.kl_temperature > 0.0 && self.kl_temperature.is_finite()) {
            return bad(format!("kl_temperature must be positive, got {}", self.kl_temperature));
        }
        self.weights().validate()
    }

    pub fn weights(&self) -> GenLossWeights {
        GenLossWeights { lambda1: self.lambda1, lambda2: self.lambda2 }
    }

    pub fn gen_options(&self) -> GenLossOptions {
        GenLossOptions {
            weights: self.weights(),
            bn_norm: self.bn_norm,
            kl_temperature: self.kl_temperature,
            logit_weighting: self.logit_weighting,
        }
    }
}

/// Mean `KL(softmax(teacher) || softmax(student))` over the batch.
pub fn distill_loss(avg_logits: &Tensor, student_logits: &Tensor) -> Result<f64> {
    Ok(losses::kl_divergence(avg_logits, student_logits, 1.0)?.0)
}

/// Distillation loss of `student` on `x` against fixed teacher logits, with
/// the gradient w.r.t. the student parameters. Also returns the batch-norm
/// updates of the forward pass.
pub fn distill_loss_and_grad(
    student: &ClientModel,
    x: &Tensor,
    teacher_logits: &Tensor,
    tau: f64,
    mode: Mode,
) -> Result<(f64, Grads, Vec<fedsyn_nn::BnUpdate>)> {
    let out = student
        .network()
        .forward(student.store(), x.clone(), ForwardOptions { mode, record: true, capture_stats: false })?;
    let (loss, _, ds) = losses::kl_divergence(teacher_logits, &out.output, tau)?;
    let mut grads = Grads::zeros_like(student.store());
    student.network().backward(
        student.store(),
        out.tape.expect("recorded"),
        ds,
        BackwardOptions { grads: Some(&mut grads), ..Default::default() },
    );
    Ok((loss, grads, out.updates))
}

/// Per-epoch metrics. Loss fields are `None` when the corresponding stage
/// ran zero steps; `acc` is present on evaluation epochs only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_gen: Option<f64>,
    pub l_ce: Option<f64>,
    pub l_bn: Option<f64>,
    pub l_div: Option<f64>,
    pub l_dis: Option<f64>,
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<u64>,
}

/// Losses of one [`fedsyn_epoch`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    /// Mean generator loss terms over the `T_G` updates.
    pub gen: Option<GenLossTerms>,
    /// Mean distillation loss over the `T_S` updates.
    pub dis: f64,
    pub gen_ms: u64,
    pub dis_ms: u64,
}

/// Mutable server state carried across epochs (and rounds).
#[derive(Clone, Debug)]
pub struct FedSynState {
    pub generator: GeneratorModel,
    pub student: ClientModel,
    gen_opt: Adam,
    student_opt: Sgd,
    rng: ChaCha8Rng,
}

impl FedSynState {
    pub fn new(student: ClientModel, generator: GeneratorModel, cfg: &FedSynConfig) -> Self {
        let gen_opt = Adam::new(generator.store(), cfg.lr_gen, 0.9, 0.999);
        let student_opt = Sgd::new(student.store(), cfg.lr_student, cfg.momentum_student);
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
        Self { generator, student, gen_opt, student_opt, rng }
    }

    /// Fresh student of `student_spec` and a generator matching the bundle's inputs.
    pub fn init(bundle: &EnsembleBundle, student_spec: &ModelSpec, cfg: &FedSynConfig) -> Result<Self> {
        if student_spec.input_shape != bundle.input_shape() || student_spec.num_classes != bundle.num_classes() {
            return Err(FedSynError::InvalidArgument(format!(
                "student {:?}/{} classes does not match bundle {:?}/{} classes",
                student_spec.input_shape,
                student_spec.num_classes,
                bundle.input_shape(),
                bundle.num_classes()
            )));
        }
        let student = build_model(student_spec, derive_seed(cfg.seed, 1))?;
        let gspec =
            GeneratorSpec { noise_dim: cfg.noise_dim, output_shape: bundle.input_shape(), widths: cfg.gen_widths };
        let generator = GeneratorModel::new(gspec, derive_seed(cfg.seed, 2))?;
        Ok(Self::new(student, generator, cfg))
    }
}

/// SplitMix64 of `seed` combined with a stream tag.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One epoch: sample `(z, y)`, update the generator `T_G` times on it,
/// regenerate `x̂` from the same `z` and take `T_S` student steps towards the
/// ensemble's softmax on `x̂`.
pub fn fedsyn_epoch(state: &mut FedSynState, bundle: &EnsembleBundle, cfg: &FedSynConfig) -> Result<EpochMetrics> {
    let t0 = Instant::now();
    let (z, y) = sample_noise_and_labels(cfg.batch_size, cfg.noise_dim, bundle.num_classes(), &mut state.rng)?;
    let opts = cfg.gen_options();
    let trace = generator_inner_loop(
        &mut state.generator,
        &mut state.gen_opt,
        bundle,
        &state.student,
        &z,
        &y,
        cfg.gen_steps,
        &opts,
    )?;
    let gen = (!trace.is_empty()).then(|| {
        let n = trace.len() as f64;
        let mut m = GenLossTerms::default();
        for t in &trace {
            m.total += t.total / n;
            m.ce += t.ce / n;
            m.bn += t.bn / n;
            m.div += t.div / n;
        }
        m
    });
    let gen_ms = t0.elapsed().as_millis() as u64;

    let t1 = Instant::now();
    let z = if cfg.fresh_z {
        sample_noise_and_labels(cfg.batch_size, cfg.noise_dim, bundle.num_classes(), &mut state.rng)?.0
    } else {
        z
    };
    let x = generate(&state.generator, &z)?;
    let teacher = average_logits_weighted(bundle, &x, cfg.logit_weighting)?;
    let mut dis = 0.0;
    for _ in 0..cfg.distill_steps {
        let (l, grads, updates) =
            distill_loss_and_grad(&state.student, &x, &teacher, cfg.kl_temperature, Mode::Train)?;
        if !l.is_finite() || !grads.all_finite() {
            return Err(FedSynError::NonFinite("distillation loss".into()));
        }
        state.student_opt.step(state.student.store_mut(), &grads);
        apply_bn_updates(state.student.store_mut(), &updates);
        dis += l / cfg.distill_steps as f64;
    }
    Ok(EpochMetrics { gen, dis, gen_ms, dis_ms: t1.elapsed().as_millis() as u64 })
}

/// Outcome of a FedSyn run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub student: ClientModel,
    pub generator: GeneratorModel,
    pub trace: Vec<EpochRecord>,
    /// Test accuracy of the final student, when a test set was given.
    pub final_accuracy: Option<f64>,
    pub gen_ms: u64,
    pub dis_ms: u64,
}

impl RunResult {
    /// Accuracy values of the trace as `(epoch, acc)` points.
    pub fn accuracy_curve(&self) -> Vec<(usize, f64)> {
        self.trace.iter().filter_map(|r| r.acc.map(|a| (r.epoch, a))).collect()
    }

    /// Writes `student.bin`, `metrics.jsonl` and `result.json` into `dir`.
    /// Each file is written to a temporary name and renamed into place.
    pub fn save(&self, dir: &Path, dataset: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = dir.join(".student.bin.tmp");
        self.student.save(&tmp, dataset)?;
        rename(&tmp, &dir.join("student.bin"))?;
        rename(&tmp.with_extension("json"), &dir.join("student.json"))?;
        write_atomic(&dir.join("metrics.jsonl"), &trace_jsonl(&self.trace))?;
        let summary = serde_json::json!({
            "final_accuracy": self.final_accuracy,
            "epochs": self.trace.len(),
            "gen_ms": self.gen_ms,
            "dis_ms": self.dis_ms,
        });
        write_atomic(&dir.join("result.json"), &serde_json::to_string_pretty(&summary).expect("json"))
    }
}

fn rename(from: &Path, to: &Path) -> Result<()> {
    std::fs::rename(from, to).map_err(io_err(to))
}

pub(crate) fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    rename(&tmp, path)
}

/// One JSON object per line.
pub fn trace_jsonl(trace: &[EpochRecord]) -> String {
    let mut s = String::new();
    for r in trace {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

/// Trains a fresh `student_spec` model from the bundle for `cfg.epochs`
/// epochs, evaluating on `test` (if any) every `cfg.eval_every` epochs.
pub fn run_fedsyn(
    bundle: &EnsembleBundle,
    student_spec: &ModelSpec,
    cfg: &FedSynConfig,
    test: Option<&DatasetHandle>,
) -> Result<RunResult> {
    cfg.validate()?;
    let mut state = FedSynState::init(bundle, student_spec, cfg)?;
    let mut trace = Vec::new();
    let (gen_ms, dis_ms) = run_epochs(&mut state, bundle, cfg, test, 0, &mut trace)?;
    finish(state, trace, test, gen_ms, dis_ms)
}

fn finish(
    state: FedSynState,
    trace: Vec<EpochRecord>,
    test: Option<&DatasetHandle>,
    gen_ms: u64,
    dis_ms: u64,
) -> Result<RunResult> {
    let final_accuracy = match trace.last().and_then(|r| r.acc) {
        Some(a) => Some(a),
        None => test.map(|t| evaluate(&state.student, t)).transpose()?,
    };
    Ok(RunResult { student: state.student, generator: state.generator, trace, final_accuracy, gen_ms, dis_ms })
}

/// Runs `cfg.epochs` epochs, numbering them from `offset + 1`.
fn run_epochs(
    state: &mut FedSynState,
    bundle: &EnsembleBundle,
    cfg: &FedSynConfig,
    test: Option<&DatasetHandle>,
    offset: usize,
    trace: &mut Vec<EpochRecord>,
) -> Result<(u64, u64)> {
    let (mut gen_ms, mut dis_ms) = (0, 0);
    for e in 1..=cfg.epochs {
        let t0 = Instant::now();
        let m = fedsyn_epoch(state, bundle, cfg)?;
        gen_ms += m.gen_ms;
        dis_ms += m.dis_ms;
        let acc = match test {
            Some(t) if e % cfg.eval_every == 0 || e == cfg.epochs => Some(evaluate(&state.student, t)?),
            _ => None,
        };
        let rec = EpochRecord {
            epoch: offset + e,
            l_gen: m.gen.map(|g| g.total),
            l_ce: m.gen.map(|g| g.ce),
            l_bn: m.gen.map(|g| g.bn),
            l_div: m.gen.map(|g| g.div),
            l_dis: (cfg.distill_steps > 0).then_some(m.dis),
            acc,
            wall_ms: (!cfg.deterministic_trace).then(|| t0.elapsed().as_millis() as u64),
        };
        log::info!(
            "epoch {}: l_gen {:?} l_dis {:.4} acc {:?}",
            rec.epoch,
            rec.l_gen.map(|v| (v * 1e4).round() / 1e4),
            m.dis,
            acc
        );
        trace.push(rec);
    }
    Ok((gen_ms, dis_ms))
}

/// `cfg.rounds` rounds of: clients start from the current global model
/// (fresh initialisation in round one), train locally, upload; the server
/// continues distilling into the same global model and generator.
pub fn run_multiround(
    data: &DatasetHandle,
    test: Option<&DatasetHandle>,
    plan: &PartitionPlan,
    archs: &[ModelSpec],
    student_spec: &ModelSpec,
    local: &LocalTrainConfig,
    cfg: &FedSynConfig,
) -> Result<RunResult> {
    cfg.validate()?;
    if archs.len() != plan.num_clients {
        return Err(FedSynError::InvalidArgument(format!("{} architectures for {} clients", archs.len(), plan.num_clients)));
    }
    if cfg.rounds > 1 && archs.iter().any(|a| a != student_spec) {
        return Err(FedSynError::Unsupported(
            "multi-round training needs every client to share the global model's architecture".into(),
        ));
    }
    let m = plan.num_clients as u64;
    let mut state: Option<FedSynState> = None;
    let mut trace = Vec::new();
    let (mut gen_ms, mut dis_ms) = (0, 0);
    for round in 0..cfg.rounds {
        let inits = match &state {
            None => client_inits(archs, local.seed)?,
            Some(st) => vec![st.student.clone(); archs.len()],
        };
        let lcfg = LocalTrainConfig { seed: local.seed.wrapping_add(round as u64 * m), ..local.clone() };
        let (models, _) = train_clients(inits, plan, data, &lcfg, Execution::default(), &LossRegistry::default())?;
        let bundle = EnsembleBundle::new(models, plan.client_sizes(), data.name())?;
        if state.is_none() {
            state = Some(FedSynState::init(&bundle, student_spec, cfg)?);
        }
        let st = state.as_mut().expect("initialised above");
        let (g, d) = run_epochs(st, &bundle, cfg, test, round * cfg.epochs, &mut trace)?;
        gen_ms += g;
        dis_ms += d;
        log::info!("round {} done", round + 1);
    }
    finish(state.expect("at least one round"), trace, test, gen_ms, dis_ms)
}
